//! The joint optimization loop: per-iteration ray sampling, rendering and
//! epipolar losses, gradient routing, per-group Adam steps, the four
//! ablation modes, and convergence logging.
//!
//! Determinism: every random draw happens on the main thread before the
//! parallel render; ray chunks have a fixed size and their gradients merge
//! in chunk order, so results do not depend on the worker count.

use crate::autodiff::{init_glorot, AdamState, ParamVector, Tape};
use crate::epipolar::{epipolar_loss, sample_pairs, PairMatches};
use crate::error::{Error, Result};
use crate::field::{
    bank_refined_pose, refined_pose, PorfNetwork, PoseBank, BANK_SEGMENT, PORF_SEGMENT,
};
use crate::harness::{evaluate, Trajectory};
use crate::image::ImageF64;
use crate::renderer::{
    colour_l1_sum, eikonal_sq_sum, render_rays, stratified_samples, ColourField, RenderContext,
    SdfField, TrackedRay,
};
use crate::se3::Pose6;
use crate::tracked::{ray_through_pixel, rodrigues_tracked, TrackedPose};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

/// Rays per parallel chunk; fixed so gradient merge order (and therefore
/// every result) is independent of the thread count.
const RAY_CHUNK: usize = 64;
/// Consecutive non-finite logging steps before training aborts.
const DIVERGENCE_PATIENCE: usize = 10;
/// Cosine decay floor: learning rates end at 5% of their initial value.
const LR_FLOOR: f64 = 0.05;
/// Pose updates ramp in linearly over the first 10% of the run (capped at
/// 500 iterations) so the scene networks bootstrap against fixed poses
/// before the pose chart starts moving.
const POSE_WARMUP_CAP: u64 = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Porf,
    BaselineEg,
    Full,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Porf, Mode::BaselineEg, Mode::Full];

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "porf" => Ok(Mode::Porf),
            "baseline_eg" => Ok(Mode::BaselineEg),
            "full" => Ok(Mode::Full),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected baseline|porf|baseline_eg|full)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Porf => "porf",
            Mode::BaselineEg => "baseline_eg",
            Mode::Full => "full",
        }
    }

    /// Ablation line label (L1 = baseline ... L4 = full).
    pub fn label(&self) -> &'static str {
        match self {
            Mode::Baseline => "L1",
            Mode::Porf => "L2",
            Mode::BaselineEg => "L3",
            Mode::Full => "L4",
        }
    }

    pub fn uses_porf(&self) -> bool {
        matches!(self, Mode::Porf | Mode::Full)
    }

    pub fn uses_eg(&self) -> bool {
        matches!(self, Mode::BaselineEg | Mode::Full)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Preset> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected desk|paper)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: u64,
    pub rays_per_iter: usize,
    pub points_per_ray: usize,
    pub pairs_per_iter: usize,
    pub threshold_px: f64,
    pub lambda: f64,
    pub beta: f64,
    pub alpha: f64,
    pub lr_render: f64,
    pub lr_pose: f64,
    pub near: f64,
    pub far: f64,
    pub seed: u64,
    pub mode: Mode,
    pub preset: Preset,
    pub log_every: u64,
}

impl TrainConfig {
    /// Desk-scale defaults: small networks, 32 points per ray, 5,000
    /// iterations.
    pub fn desk() -> Self {
        TrainConfig {
            iterations: 5_000,
            rays_per_iter: 512,
            points_per_ray: 32,
            pairs_per_iter: 20,
            threshold_px: 20.0,
            lambda: 0.1,
            beta: 1.0,
            alpha: 0.01,
            lr_render: 5e-4,
            lr_pose: 5e-4,
            near: 0.05,
            far: 4.0,
            seed: 0,
            mode: Mode::Full,
            preset: Preset::Desk,
            log_every: 100,
        }
    }

    /// Full-scale defaults: larger networks, 128 points per ray, 50,000
    /// iterations.
    pub fn paper() -> Self {
        TrainConfig {
            iterations: 50_000,
            points_per_ray: 128,
            preset: Preset::Paper,
            ..TrainConfig::desk()
        }
    }

    pub fn networks(&self) -> (SdfField, ColourField) {
        match self.preset {
            Preset::Desk => (SdfField::desk(), ColourField::desk()),
            Preset::Paper => (SdfField::paper(), ColourField::paper()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rays_per_iter == 0
            || self.points_per_ray == 0
            || self.pairs_per_iter == 0
            || self.log_every == 0
        {
            return Err(Error::Config("counts must be at least 1".to_string()));
        }
        if !(self.lr_render > 0.0 && self.lr_pose > 0.0) {
            return Err(Error::Config("learning rates must be positive".to_string()));
        }
        if !(self.threshold_px > 0.0) {
            return Err(Error::Config("threshold must be positive".to_string()));
        }
        if !(self.lambda >= 0.0 && self.beta >= 0.0 && self.alpha > 0.0) {
            return Err(Error::Config(
                "lambda/beta must be non-negative and alpha positive".to_string(),
            ));
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err(Error::Config(format!(
                "invalid near/far range {}..{}",
                self.near, self.far
            )));
        }
        Ok(())
    }
}

/// Everything one refinement run consumes.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<ImageF64>,
    pub initial: Trajectory,
    pub matches: Vec<PairMatches>,
    pub gt: Option<Trajectory>,
}

impl Dataset {
    fn validate(&self, config: &TrainConfig) -> Result<()> {
        let n = self.initial.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 frames, got {n}"
            )));
        }
        if self.images.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} images for {n} poses",
                self.images.len()
            )));
        }
        let k = &self.initial.intrinsics;
        for (i, img) in self.images.iter().enumerate() {
            if img.width != k.width || img.height != k.height {
                return Err(Error::InvalidArgument(format!(
                    "image {i} is {}x{}, intrinsics say {}x{}",
                    img.width, img.height, k.width, k.height
                )));
            }
        }
        for pair in &self.matches {
            if pair.frame_j >= n {
                return Err(Error::InvalidArgument(format!(
                    "match pair ({}, {}) outside 0..{n}",
                    pair.frame_i, pair.frame_j
                )));
            }
        }
        if let Some(gt) = &self.gt {
            if gt.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "ground truth has {} frames, dataset has {n}",
                    gt.len()
                )));
            }
        }
        if config.mode.uses_eg() && !self.matches.iter().any(|p| !p.is_empty()) {
            return Err(Error::InvalidArgument(
                "mode needs correspondences but none are available".to_string(),
            ));
        }
        Ok(())
    }
}

/// Frame-to-tracked-pose dispatch for the four modes.
#[derive(Debug, Clone)]
pub struct PoseModel {
    pub mode: Mode,
    pub porf: PorfNetwork,
    pub bank: PoseBank,
    pub pose_off: usize,
}

impl PoseModel {
    pub fn tracked_pose(
        &self,
        tape: &mut Tape,
        params: &[f64],
        frame: usize,
        initial: &Pose6,
    ) -> Result<TrackedPose> {
        if self.mode.uses_porf() {
            refined_pose(tape, params, self.pose_off, &self.porf, frame, initial)
        } else {
            bank_refined_pose(tape, params, self.pose_off, &self.bank, frame, initial)
        }
    }

    /// Current refined poses as plain values.
    pub fn trajectory(&self, params: &[f64], initial: &Trajectory) -> Result<Trajectory> {
        let mut tape = Tape::new();
        let mut poses = Vec::with_capacity(initial.len());
        for (frame, pose) in initial.poses.iter().enumerate() {
            let tracked = self.tracked_pose(&mut tape, params, frame, pose)?;
            poses.push(tracked.value(&tape));
            tape.reset();
        }
        Ok(Trajectory {
            poses,
            intrinsics: initial.intrinsics,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub l_colour: f64,
    pub l_reg: f64,
    pub l_eg: f64,
    pub rot_err_deg: f64,
    pub trans_err: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
}

impl RunLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("iter,l_colour,l_reg,l_eg,rot_err_deg,trans_err,wall_s\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.3}\n",
                r.iter, r.l_colour, r.l_reg, r.l_eg, r.rot_err_deg, r.trans_err, r.wall_s
            ));
        }
        std::fs::File::create(path)?.write_all(out.as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainDiagnostics {
    pub nonfinite_grads: u64,
    pub degenerate_pairs: u64,
}

pub struct TrainOutput {
    pub refined: Trajectory,
    pub log: RunLog,
    pub params: ParamVector,
    pub pose_model: PoseModel,
    pub sdf: SdfField,
    pub colour: ColourField,
    pub diagnostics: TrainDiagnostics,
    /// Set when training aborted after too many non-finite logging steps;
    /// the returned parameters/poses are the last finite snapshot.
    pub diverged_at: Option<u64>,
}

struct RayWork {
    u: f64,
    v: f64,
    gt: [f64; 3],
    samples: Vec<f64>,
}

/// Joint optimization of the rendering networks and the pose model.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutput> {
    config.validate()?;
    dataset.validate(config)?;
    let start = Instant::now();
    let n_frames = dataset.initial.len();
    let k = dataset.initial.intrinsics;

    let (sdf, colour) = config.networks();
    let porf = PorfNetwork::with_default_hidden(n_frames, config.alpha)?;
    let bank = PoseBank::new(n_frames)?;

    let mut params = ParamVector::new();
    let sdf_off = params.add_segment("sdf", sdf.param_count());
    let sharp_off = params.add_segment("sdf_sharpness", 1);
    let colour_off = params.add_segment("colour", colour.param_count());
    let render_range = 0..params.len();
    let pose_off = if config.mode.uses_porf() {
        params.add_segment(PORF_SEGMENT, porf.param_count())
    } else {
        params.add_segment(BANK_SEGMENT, bank.param_count())
    };
    let pose_range = pose_off..params.len();

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_glorot(&sdf.spec, params.segment_slice_mut("sdf").unwrap(), &mut init_rng);
    params.segment_slice_mut("sdf_sharpness").unwrap()[0] = SdfField::initial_log_sharpness();
    init_glorot(
        &colour.spec,
        params.segment_slice_mut("colour").unwrap(),
        &mut init_rng,
    );
    if config.mode.uses_porf() {
        porf.init_params(params.segment_slice_mut(PORF_SEGMENT).unwrap(), &mut init_rng);
    }
    // The bank starts at zero residuals (already zero-initialized).

    let pose_model = PoseModel {
        mode: config.mode,
        porf,
        bank,
        pose_off,
    };

    let mut adam = AdamState::new(params.len());
    let mut grads = vec![0.0; params.len()];
    let n_chunks = config.rays_per_iter.div_ceil(RAY_CHUNK);
    let mut tapes: Vec<Tape> = (0..n_chunks).map(|_| Tape::new()).collect();
    let mut chunk_grads: Vec<Vec<f64>> = (0..n_chunks).map(|_| vec![0.0; params.len()]).collect();
    let mut eg_tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x517c_c1b7_2722_0a95);

    let mut log = RunLog::default();
    let mut diagnostics = TrainDiagnostics::default();
    let mut consecutive_bad = 0usize;
    let mut last_good: Option<(ParamVector, u64)> = None;
    let mut diverged_at = None;

    let eval_against_gt = |model: &PoseModel, params: &ParamVector| -> (f64, f64) {
        match &dataset.gt {
            Some(gt) if gt.len() >= 3 => {
                let refined = model
                    .trajectory(params.data(), &dataset.initial)
                    .expect("pose evaluation");
                match evaluate(&refined, gt) {
                    Ok(report) => (report.mean_rot_deg, report.mean_trans),
                    Err(_) => (f64::NAN, f64::NAN),
                }
            }
            _ => (f64::NAN, f64::NAN),
        }
    };

    for iter in 0..config.iterations {
        // All random decisions happen here, on one stream.
        let frame = rng.random_range(0..n_frames);
        let image = &dataset.images[frame];
        let initial_pose = dataset.initial.poses[frame];
        let mut work = Vec::with_capacity(config.rays_per_iter);
        for _ in 0..config.rays_per_iter {
            let uj = rng.random_range(0..k.width);
            let vj = rng.random_range(0..k.height);
            let samples =
                stratified_samples(config.near, config.far, config.points_per_ray, || {
                    rng.random()
                })?;
            work.push(RayWork {
                u: uj as f64 + 0.5,
                v: vj as f64 + 0.5,
                gt: image.pixel(uj, vj),
                samples,
            });
        }
        let sampled_pairs = if config.mode.uses_eg() {
            sample_pairs(&dataset.matches, config.pairs_per_iter, &mut rng)?
        } else {
            Vec::new()
        };

        // Parallel render over fixed-size chunks; merge in chunk order.
        let m = config.rays_per_iter as f64;
        let nm = (config.rays_per_iter * config.points_per_ray) as f64;
        let ctx = RenderContext {
            sdf: &sdf,
            colour: &colour,
            sdf_off,
            sharp_off,
            colour_off,
        };
        let chunk_results: Result<Vec<(f64, f64)>> = tapes
            .par_iter_mut()
            .zip(chunk_grads.par_iter_mut())
            .zip(work.par_chunks(RAY_CHUNK))
            .map(|((tape, cgrad), chunk)| {
                tape.reset();
                cgrad.iter_mut().for_each(|g| *g = 0.0);
                let pose =
                    pose_model.tracked_pose(tape, params.data(), frame, &initial_pose)?;
                let rot = rodrigues_tracked(tape, &pose.r);
                let mut rays = Vec::with_capacity(chunk.len());
                let mut samples = Vec::with_capacity(chunk.len());
                for w in chunk {
                    let dir_cam = k.pixel_ray(w.u, w.v);
                    let (origin, dir) = ray_through_pixel(tape, &rot, &pose.t, &dir_cam);
                    rays.push(TrackedRay {
                        origin,
                        dir,
                        gt: w.gt,
                    });
                    samples.push(w.samples.clone());
                }
                let results = render_rays(tape, params.data(), &ctx, &rays, &samples)?;
                let colour_sum = colour_l1_sum(tape, &results)?;
                let eik_sum = eikonal_sq_sum(tape, &results)?;
                let c_term = tape.mul_c(colour_sum, 1.0 / m);
                let e_term = tape.mul_c(eik_sum, config.lambda / nm);
                let partial = tape.add(c_term, e_term);
                tape.backward(partial, params.data(), cgrad)?;
                Ok((tape.val(colour_sum) / m, tape.val(eik_sum) / nm))
            })
            .collect();
        let chunk_results = chunk_results?;

        grads.iter_mut().for_each(|g| *g = 0.0);
        let mut l_colour = 0.0;
        let mut l_reg = 0.0;
        for (ci, (c, e)) in chunk_results.iter().enumerate() {
            l_colour += c;
            l_reg += e;
            let cg = &chunk_grads[ci];
            for (g, d) in grads.iter_mut().zip(cg) {
                *g += d;
            }
        }

        // Epipolar term: gradients reach the pose parameters only.
        let mut l_eg = 0.0;
        if config.mode.uses_eg() {
            eg_tape.reset();
            let mut cache: HashMap<usize, TrackedPose> = HashMap::new();
            let data = params.data();
            let mut provider = |tape: &mut Tape, f: usize| {
                if let Some(p) = cache.get(&f) {
                    return Ok(*p);
                }
                let p = pose_model.tracked_pose(tape, data, f, &dataset.initial.poses[f])?;
                cache.insert(f, p);
                Ok(p)
            };
            let (eg_var, batch) = epipolar_loss(
                &mut eg_tape,
                &dataset.matches,
                &sampled_pairs,
                &mut provider,
                &k,
                config.threshold_px,
            )?;
            diagnostics.degenerate_pairs += batch.degenerate_skips as u64;
            l_eg = eg_tape.val(eg_var);
            if config.beta > 0.0 {
                eg_tape.backward_seeded(&[(eg_var, config.beta)], params.data(), &mut grads)?;
            }
        }

        let total = l_colour + config.lambda * l_reg + config.beta * l_eg;

        // Per-group Adam steps under one shared step counter.
        let decay = LR_FLOOR
            + (1.0 - LR_FLOOR)
                * 0.5
                * (1.0 + (std::f64::consts::PI * iter as f64 / config.iterations as f64).cos());
        let warmup_len = (config.iterations / 10).clamp(1, POSE_WARMUP_CAP);
        let warmup = ((iter + 1) as f64 / warmup_len as f64).min(1.0);
        adam.step_range(
            params.data_mut(),
            &mut grads,
            render_range.clone(),
            config.lr_render * decay,
        )?;
        adam.step_range(
            params.data_mut(),
            &mut grads,
            pose_range.clone(),
            config.lr_pose * decay * warmup,
        )?;
        adam.advance();

        if iter % config.log_every == 0 || iter + 1 == config.iterations {
            let (rot_err, trans_err) = eval_against_gt(&pose_model, &params);
            log::info!(
                "[{}] iter {iter}: colour {l_colour:.4} reg {l_reg:.4} eg {l_eg:.4} rot {rot_err:.4} deg trans {trans_err:.2}",
                config.mode.name()
            );
            log.rows.push(LogRow {
                iter,
                l_colour,
                l_reg,
                l_eg,
                rot_err_deg: rot_err,
                trans_err,
                wall_s: start.elapsed().as_secs_f64(),
            });
            if total.is_finite() && params.all_finite() {
                consecutive_bad = 0;
                last_good = Some((params.clone(), iter));
            } else {
                consecutive_bad += 1;
                if consecutive_bad >= DIVERGENCE_PATIENCE {
                    log::error!("training diverged at iteration {iter}");
                    diverged_at = Some(iter);
                    break;
                }
            }
        }
    }

    diagnostics.nonfinite_grads = adam.nonfinite_grads;
    if diverged_at.is_some() {
        if let Some((good_params, _)) = last_good {
            params = good_params;
        }
    }
    let refined = pose_model.trajectory(params.data(), &dataset.initial)?;
    Ok(TrainOutput {
        refined,
        log,
        params,
        pose_model,
        sdf,
        colour,
        diagnostics,
        diverged_at,
    })
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub mode: Mode,
    pub final_rot_deg: f64,
    pub final_trans: f64,
    pub initial_rot_deg: f64,
    pub iters_to_half_rot: u64,
    pub diverged: bool,
    pub log: RunLog,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub beta: f64,
}

impl AblationReport {
    pub fn table_text(&self) -> String {
        let mut out = format!(
            "ablation over modes (beta = {}):\n{:<4} {:<12} {:>14} {:>14} {:>18}\n",
            self.beta, "line", "mode", "final_rot_deg", "final_trans", "iters_to_half_rot"
        );
        for run in &self.runs {
            out.push_str(&format!(
                "{:<4} {:<12} {:>14.6} {:>14.6} {:>18}{}\n",
                run.mode.label(),
                run.mode.name(),
                run.final_rot_deg,
                run.final_trans,
                run.iters_to_half_rot,
                if run.diverged { "  DIVERGED" } else { "" }
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out =
            String::from("mode,final_rot_err_deg,final_trans_err,iters_to_half_rot_err,diverged\n");
        for run in &self.runs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                run.mode.name(),
                run.final_rot_deg,
                run.final_trans,
                run.iters_to_half_rot,
                run.diverged
            ));
        }
        std::fs::File::create(path)?.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn run(&self, mode: Mode) -> &AblationRun {
        self.runs.iter().find(|r| r.mode == mode).expect("all modes present")
    }
}

/// Summarize one finished run against the ground truth: final errors and
/// the first logged iteration at which the rotation error halved (budget
/// when it never did).
pub fn summarize_run(
    mode: Mode,
    out: &TrainOutput,
    gt: &Trajectory,
    initial_rot: f64,
    budget: u64,
) -> Result<AblationRun> {
    let final_report = evaluate(&out.refined, gt)?;
    let half = initial_rot / 2.0;
    let iters_to_half = out
        .log
        .rows
        .iter()
        .find(|r| r.rot_err_deg.is_finite() && r.rot_err_deg <= half)
        .map(|r| r.iter)
        .unwrap_or(budget);
    Ok(AblationRun {
        mode,
        final_rot_deg: final_report.mean_rot_deg,
        final_trans: final_report.mean_trans,
        initial_rot_deg: initial_rot,
        iters_to_half_rot: iters_to_half,
        diverged: out.diverged_at.is_some(),
        log: out.log.clone(),
    })
}

/// Run all four modes with identical seeds and budgets.
pub fn ablate(config: &TrainConfig, dataset: &Dataset) -> Result<AblationReport> {
    if dataset.gt.is_none() {
        return Err(Error::InvalidArgument(
            "ablation needs ground-truth poses for its error curves".to_string(),
        ));
    }
    let gt = dataset.gt.as_ref().unwrap();
    let initial_report = evaluate(&dataset.initial, gt)?;
    let initial_rot = initial_report.mean_rot_deg;
    let mut runs = Vec::new();
    for mode in Mode::ALL {
        let mut cfg = config.clone();
        cfg.mode = mode;
        let out = train(&cfg, dataset)?;
        runs.push(summarize_run(mode, &out, gt, initial_rot, cfg.iterations)?);
    }
    Ok(AblationReport {
        runs,
        beta: config.beta,
    })
}
