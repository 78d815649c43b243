//! Synthetic ground truth and evaluation: analytic SDF scenes, orbit
//! trajectories, sphere-traced reference images, correspondence synthesis
//! with noise and outliers, pose perturbation, similarity alignment, and
//! trajectory/PSNR metrics.

use crate::epipolar::{Correspondence, PairMatches};
use crate::error::{Error, Result};
use crate::image::ImageF64;
use crate::se3::{
    add3, cross3, dot3, norm3, normalize3, project, relative_pose, rotation_angle,
    rotation_log, scale3, sub3, Intrinsics, Mat3, Pose6, Vec3,
};
use crate::textio::{fmt_f64, parse_f64, parse_usize};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::Write;
use std::path::Path;

const SPHERE_TRACE_STEPS: usize = 128;
const SPHERE_TRACE_HIT: f64 = 1e-4;
const SPHERE_TRACE_FAR: f64 = 20.0;
const BACKGROUND: [f64; 3] = [0.1, 0.1, 0.1];
const LIGHT_DIR: Vec3 = [0.408_248_290_463_863, 0.816_496_580_927_726, 0.408_248_290_463_863];

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Sphere { centre: Vec3, radius: f64 },
    Cuboid { centre: Vec3, half_extents: Vec3 },
}

impl Primitive {
    fn sdf(&self, x: &Vec3) -> f64 {
        match self {
            Primitive::Sphere { centre, radius } => norm3(&sub3(x, centre)) - radius,
            Primitive::Cuboid {
                centre,
                half_extents,
            } => {
                let d = sub3(x, centre);
                let q = [
                    d[0].abs() - half_extents[0],
                    d[1].abs() - half_extents[1],
                    d[2].abs() - half_extents[2],
                ];
                let outside = [q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)];
                norm3(&outside) + q[0].max(q[1]).max(q[2]).min(0.0)
            }
        }
    }

    fn bounding_radius(&self) -> f64 {
        match self {
            Primitive::Sphere { centre, radius } => norm3(centre) + radius,
            Primitive::Cuboid {
                centre,
                half_extents,
            } => norm3(centre) + norm3(half_extents),
        }
    }

    fn scaled(&self, s: f64) -> Primitive {
        match self {
            Primitive::Sphere { centre, radius } => Primitive::Sphere {
                centre: scale3(centre, s),
                radius: radius * s,
            },
            Primitive::Cuboid {
                centre,
                half_extents,
            } => Primitive::Cuboid {
                centre: scale3(centre, s),
                half_extents: scale3(half_extents, s),
            },
        }
    }
}

/// Analytic scene: smooth-min union of primitives with a tri-axial sinusoid
/// colour palette (per-primitive phase). Normalized on construction so the
/// geometry fits inside the unit ball.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub blend: f64,
}

impl SyntheticScene {
    pub fn new(primitives: Vec<Primitive>, blend: f64) -> Result<Self> {
        if primitives.is_empty() {
            return Err(Error::InvalidArgument("scene has no primitives".to_string()));
        }
        if !(blend >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "blend must be non-negative, got {blend}"
            )));
        }
        let bound = primitives
            .iter()
            .map(|p| p.bounding_radius())
            .fold(0.0f64, f64::max);
        let (primitives, blend) = if bound > 0.95 {
            let s = 0.95 / bound;
            (primitives.iter().map(|p| p.scaled(s)).collect(), blend * s)
        } else {
            (primitives, blend)
        };
        Ok(SyntheticScene { primitives, blend })
    }
}

fn smooth_min(a: f64, b: f64, k: f64) -> f64 {
    if k <= 0.0 {
        return a.min(b);
    }
    let h = (0.5 + 0.5 * (b - a) / k).clamp(0.0, 1.0);
    b * (1.0 - h) + a * h - k * h * (1.0 - h)
}

/// Signed distance and surface colour of the scene at a point. The colour
/// is the palette of the nearest primitive.
pub fn scene_sdf(scene: &SyntheticScene, x: &Vec3) -> Result<(f64, [f64; 3])> {
    if scene.primitives.is_empty() {
        return Err(Error::InvalidArgument("scene has no primitives".to_string()));
    }
    let mut dist = scene.primitives[0].sdf(x);
    let mut nearest = 0usize;
    let mut nearest_d = dist;
    for (i, p) in scene.primitives.iter().enumerate().skip(1) {
        let d = p.sdf(x);
        if d < nearest_d {
            nearest_d = d;
            nearest = i;
        }
        dist = smooth_min(dist, d, scene.blend);
    }
    Ok((dist, palette(x, nearest)))
}

fn palette(x: &Vec3, primitive_index: usize) -> [f64; 3] {
    // Golden-angle phase per primitive keeps colours distinct.
    let phase = primitive_index as f64 * 2.399_963_229_728_653;
    [
        0.5 + 0.45 * (6.0 * x[0] + phase).sin(),
        0.5 + 0.45 * (6.0 * x[1] + 2.0 + phase).sin(),
        0.5 + 0.45 * (6.0 * x[2] + 4.0 + phase).sin(),
    ]
}

fn scene_distance(scene: &SyntheticScene, x: &Vec3) -> f64 {
    let mut dist = scene.primitives[0].sdf(x);
    for p in &scene.primitives[1..] {
        dist = smooth_min(dist, p.sdf(x), scene.blend);
    }
    dist
}

fn scene_normal(scene: &SyntheticScene, x: &Vec3) -> Vec3 {
    let h = 1e-5;
    let mut n = [0.0; 3];
    for (c, nc) in n.iter_mut().enumerate() {
        let mut xp = *x;
        let mut xm = *x;
        xp[c] += h;
        xm[c] -= h;
        *nc = (scene_distance(scene, &xp) - scene_distance(scene, &xm)) / (2.0 * h);
    }
    normalize3(&n)
}

/// Ordered camera poses with shared intrinsics; the vector index is the
/// frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose6>,
    pub intrinsics: Intrinsics,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    fn mean_centre_norm(&self) -> f64 {
        if self.poses.is_empty() {
            return 0.0;
        }
        self.poses.iter().map(|p| norm3(&p.t)).sum::<f64>() / self.poses.len() as f64
    }
}

/// Camera-to-world pose at `centre` with the optical axis through `target`.
pub fn look_at_pose(centre: &Vec3, target: &Vec3) -> Result<Pose6> {
    let forward = normalize3(&sub3(target, centre));
    let up = [0.0, 1.0, 0.0];
    let right_raw = cross3(&up, &forward);
    if norm3(&right_raw) < 1e-9 {
        return Err(Error::DegenerateGeometry(
            "optical axis parallel to the up vector".to_string(),
        ));
    }
    let right = normalize3(&right_raw);
    let down = cross3(&forward, &right);
    let rm = Mat3::from_rows(
        [right[0], down[0], forward[0]],
        [right[1], down[1], forward[1]],
        [right[2], down[2], forward[2]],
    );
    Pose6::new(rotation_log(&rm)?, *centre)
}

/// Cameras equally spaced on a circle of the given radius and elevation,
/// each looking at the origin.
pub fn orbit_trajectory(
    n_frames: usize,
    radius: f64,
    elevation_deg: f64,
    intrinsics: Intrinsics,
) -> Result<Trajectory> {
    if n_frames < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 frames, got {n_frames}"
        )));
    }
    if !(radius > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "orbit radius must exceed the unit ball, got {radius}"
        )));
    }
    if elevation_deg.abs() >= 89.0 {
        return Err(Error::InvalidArgument(format!(
            "elevation {elevation_deg} too close to the pole"
        )));
    }
    let elev = elevation_deg.to_radians();
    let mut poses = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / n_frames as f64;
        let centre = [
            radius * elev.cos() * theta.cos(),
            radius * elev.sin(),
            radius * elev.cos() * theta.sin(),
        ];
        poses.push(look_at_pose(&centre, &[0.0; 3])?);
    }
    Ok(Trajectory { poses, intrinsics })
}

/// Sphere-trace the scene along a ray; returns the hit point.
fn sphere_trace(scene: &SyntheticScene, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
    let mut t = 0.0;
    for _ in 0..SPHERE_TRACE_STEPS {
        let p = add3(origin, &scale3(dir, t));
        let d = scene_distance(scene, &p);
        if d < SPHERE_TRACE_HIT {
            return Some((t, p));
        }
        t += d;
        if t > SPHERE_TRACE_FAR {
            return None;
        }
    }
    None
}

/// Reference image by per-pixel sphere tracing with Lambertian shading from
/// a fixed light; misses get the background colour.
pub fn render_gt_image(scene: &SyntheticScene, pose: &Pose6, k: &Intrinsics) -> ImageF64 {
    let mut img = ImageF64::new(k.width, k.height);
    let rot = pose.rotation();
    for v in 0..k.height {
        for u in 0..k.width {
            let dir_cam = k.pixel_ray(u as f64 + 0.5, v as f64 + 0.5);
            let dir = rot.mul_vec(&dir_cam);
            let rgb = match sphere_trace(scene, &pose.t, &dir) {
                Some((_, p)) => {
                    let (_, base) = scene_sdf(scene, &p).expect("non-empty scene");
                    let n = scene_normal(scene, &p);
                    let shade = 0.25 + 0.75 * dot3(&n, &LIGHT_DIR).max(0.0);
                    [base[0] * shade, base[1] * shade, base[2] * shade]
                }
                None => BACKGROUND,
            };
            img.set_pixel(u, v, rgb);
        }
    }
    img
}

/// Pose noise: per-axis Gaussians on the axis-angle (degrees) and on the
/// translation (fraction of the orbit radius).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma_rot_deg: f64,
    pub sigma_trans_frac: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma_rot_deg: f64, sigma_trans_frac: f64, seed: u64) -> Result<Self> {
        if !(sigma_rot_deg >= 0.0 && sigma_trans_frac >= 0.0) {
            return Err(Error::InvalidArgument(
                "noise magnitudes must be non-negative".to_string(),
            ));
        }
        Ok(NoiseSpec {
            sigma_rot_deg,
            sigma_trans_frac,
            seed,
        })
    }
}

/// Additive Gaussian pose noise, deterministic under the spec seed. Zero
/// sigmas return the trajectory bit-unchanged.
pub fn perturb_poses(traj: &Trajectory, noise: &NoiseSpec) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let sigma_r = noise.sigma_rot_deg.to_radians();
    let sigma_t = noise.sigma_trans_frac * traj.mean_centre_norm();
    let mut poses = Vec::with_capacity(traj.poses.len());
    for pose in &traj.poses {
        let mut r = pose.r;
        let mut t = pose.t;
        if sigma_r > 0.0 {
            let n = Normal::new(0.0, sigma_r).expect("positive sigma");
            for c in r.iter_mut() {
                *c += n.sample(&mut rng);
            }
        }
        if sigma_t > 0.0 {
            let n = Normal::new(0.0, sigma_t).expect("positive sigma");
            for c in t.iter_mut() {
                *c += n.sample(&mut rng);
            }
        }
        poses.push(Pose6::new(r, t)?);
    }
    Ok(Trajectory {
        poses,
        intrinsics: traj.intrinsics,
    })
}

/// Correspondence synthesis: for every frame pair inside the covisibility
/// window, sphere-trace surface points from frame i, project into frame j,
/// keep mutually visible ones, add pixel noise, and replace a fixed
/// rounded fraction with uniform-random outlier pairs.
///
/// Per-pair RNG streams derive from the master seed and the pair's frame
/// indices, so synthesis is deterministic and order-independent.
pub fn synth_correspondences(
    scene: &SyntheticScene,
    traj: &Trajectory,
    per_pair_count: usize,
    noise_px: f64,
    outlier_rate: f64,
    max_pair_angle_deg: f64,
    master_seed: u64,
) -> Result<Vec<PairMatches>> {
    Ok(synth_correspondences_labeled(
        scene,
        traj,
        per_pair_count,
        noise_px,
        outlier_rate,
        max_pair_angle_deg,
        master_seed,
    )?
    .0)
}

/// As [`synth_correspondences`], also returning per-correspondence outlier
/// labels for verification.
pub fn synth_correspondences_labeled(
    scene: &SyntheticScene,
    traj: &Trajectory,
    per_pair_count: usize,
    noise_px: f64,
    outlier_rate: f64,
    max_pair_angle_deg: f64,
    master_seed: u64,
) -> Result<(Vec<PairMatches>, Vec<Vec<bool>>)> {
    if per_pair_count == 0 {
        return Err(Error::InvalidArgument(
            "per-pair count must be at least 1".to_string(),
        ));
    }
    if !(0.0..1.0).contains(&outlier_rate) {
        return Err(Error::InvalidArgument(format!(
            "outlier rate must be in [0, 1), got {outlier_rate}"
        )));
    }
    let k = &traj.intrinsics;
    let max_angle = max_pair_angle_deg.to_radians();
    let mut db = Vec::new();
    let mut labels = Vec::new();
    for i in 0..traj.len() {
        for j in i + 1..traj.len() {
            let (r_rel, _) = relative_pose(&traj.poses[i], &traj.poses[j]);
            if rotation_angle(&r_rel)? > max_angle {
                continue;
            }
            let stream = ((i as u64) << 32) | j as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(
                master_seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let pose_i = &traj.poses[i];
            let pose_j = &traj.poses[j];
            let rot_i = pose_i.rotation();
            let mut matches = Vec::with_capacity(per_pair_count);
            let mut attempts = 0usize;
            let max_attempts = per_pair_count.saturating_mul(200);
            while matches.len() < per_pair_count && attempts < max_attempts {
                attempts += 1;
                let u = rng.random_range(0.0..k.width as f64);
                let v = rng.random_range(0.0..k.height as f64);
                let dir = rot_i.mul_vec(&k.pixel_ray(u, v));
                let Some((_, x_world)) = sphere_trace(scene, &pose_i.t, &dir) else {
                    continue;
                };
                let (Some(p_i), Some(p_j)) = (
                    project(pose_i, k, &x_world),
                    project(pose_j, k, &x_world),
                ) else {
                    continue;
                };
                if !k.contains(p_j[0], p_j[1]) || !k.contains(p_i[0], p_i[1]) {
                    continue;
                }
                // Occlusion check from frame j.
                let to_point = sub3(&x_world, &pose_j.t);
                let dist_j = norm3(&to_point);
                let dir_j = scale3(&to_point, 1.0 / dist_j);
                let Some((t_hit, _)) = sphere_trace(scene, &pose_j.t, &dir_j) else {
                    continue;
                };
                if (t_hit - dist_j).abs() > 1e-3 {
                    continue;
                }
                matches.push(Correspondence {
                    u1: p_i[0],
                    v1: p_i[1],
                    u2: p_j[0],
                    v2: p_j[1],
                });
            }
            if matches.is_empty() {
                continue;
            }
            if noise_px > 0.0 {
                let n = Normal::new(0.0, noise_px).expect("positive sigma");
                for c in matches.iter_mut() {
                    c.u1 += n.sample(&mut rng);
                    c.v1 += n.sample(&mut rng);
                    c.u2 += n.sample(&mut rng);
                    c.v2 += n.sample(&mut rng);
                }
            }
            // Exactly round(rate * count) outliers at random positions.
            let n_out = (outlier_rate * matches.len() as f64).round() as usize;
            let mut flags = vec![false; matches.len()];
            let mut order: Vec<usize> = (0..matches.len()).collect();
            for s in 0..n_out.min(matches.len()) {
                let pick = rng.random_range(s..order.len());
                order.swap(s, pick);
                let idx = order[s];
                matches[idx] = Correspondence {
                    u1: rng.random_range(0.0..k.width as f64),
                    v1: rng.random_range(0.0..k.height as f64),
                    u2: rng.random_range(0.0..k.width as f64),
                    v2: rng.random_range(0.0..k.height as f64),
                };
                flags[idx] = true;
            }
            db.push(PairMatches::new(i, j, matches)?);
            labels.push(flags);
        }
    }
    if db.is_empty() {
        log::warn!("no covisible pairs within {max_pair_angle_deg} degrees");
    }
    Ok((db, labels))
}

/// Similarity transform mapping estimated onto ground-truth coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Sim3 {
    pub fn identity() -> Self {
        Sim3 {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: [0.0; 3],
        }
    }

    pub fn apply_point(&self, x: &Vec3) -> Vec3 {
        add3(
            &scale3(&self.rotation.mul_vec(x), self.scale),
            &self.translation,
        )
    }

    pub fn apply_pose(&self, pose: &Pose6) -> Result<Pose6> {
        let rot = self.rotation.mul_mat(&pose.rotation());
        Pose6::new(rotation_log(&rot)?, self.apply_point(&pose.t))
    }
}

/// Closed-form least-squares similarity (scale, rotation, translation)
/// aligning the estimated camera centres onto the ground truth, applied to
/// the estimated trajectory.
pub fn umeyama_align(est: &Trajectory, gt: &Trajectory) -> Result<(Sim3, Trajectory)> {
    let n = est.len();
    if n != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectory sizes differ: {n} vs {}",
            gt.len()
        )));
    }
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "alignment needs at least 3 frames, got {n}"
        )));
    }
    let nf = n as f64;
    let mut mu_e = [0.0; 3];
    let mut mu_g = [0.0; 3];
    for k in 0..n {
        mu_e = add3(&mu_e, &est.poses[k].t);
        mu_g = add3(&mu_g, &gt.poses[k].t);
    }
    mu_e = scale3(&mu_e, 1.0 / nf);
    mu_g = scale3(&mu_g, 1.0 / nf);

    // Covariance of (gt, est) centred pairs and the est variance.
    let mut cov = [[0.0f64; 3]; 3];
    let mut var_e = 0.0;
    for k in 0..n {
        let e = sub3(&est.poses[k].t, &mu_e);
        let g = sub3(&gt.poses[k].t, &mu_g);
        var_e += dot3(&e, &e);
        for r in 0..3 {
            for c in 0..3 {
                cov[r][c] += g[r] * e[c];
            }
        }
    }
    var_e /= nf;
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= nf;
        }
    }

    let cov_na = nalgebra::Matrix3::from_fn(|r, c| cov[r][c]);
    let svd = cov_na.svd(true, true);
    let (u, vt, d) = (
        svd.u.ok_or_else(|| Error::DegenerateGeometry("svd failed".into()))?,
        svd.v_t
            .ok_or_else(|| Error::DegenerateGeometry("svd failed".into()))?,
        svd.singular_values,
    );
    if d[1] <= 1e-12 * d[0].max(1e-300) {
        return Err(Error::DegenerateGeometry(
            "camera centres are (near) collinear".to_string(),
        ));
    }
    let flip = (u * vt).determinant() < 0.0;
    let s_diag = nalgebra::Vector3::new(1.0, 1.0, if flip { -1.0 } else { 1.0 });
    let rot_na = u * nalgebra::Matrix3::from_diagonal(&s_diag) * vt;
    let rotation = Mat3 {
        m: [
            [rot_na[(0, 0)], rot_na[(0, 1)], rot_na[(0, 2)]],
            [rot_na[(1, 0)], rot_na[(1, 1)], rot_na[(1, 2)]],
            [rot_na[(2, 0)], rot_na[(2, 1)], rot_na[(2, 2)]],
        ],
    };
    if var_e <= 0.0 {
        return Err(Error::DegenerateGeometry(
            "estimated centres coincide".to_string(),
        ));
    }
    let trace_ds = d[0] + d[1] + if flip { -d[2] } else { d[2] };
    let scale = trace_ds / var_e;
    let translation = sub3(&mu_g, &scale3(&rotation.mul_vec(&mu_e), scale));
    let sim = Sim3 {
        scale,
        rotation,
        translation,
    };
    let mut aligned = Vec::with_capacity(n);
    for pose in &est.poses {
        aligned.push(sim.apply_pose(pose)?);
    }
    Ok((
        sim,
        Trajectory {
            poses: aligned,
            intrinsics: est.intrinsics,
        },
    ))
}

/// Per-frame rotation/translation errors and their means. Translation is
/// in scene units x1000 ("mm-equivalent" for a unit-normalized scene).
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_frame_rot_deg: Vec<f64>,
    pub per_frame_trans: Vec<f64>,
    pub mean_rot_deg: f64,
    pub mean_trans: f64,
    pub sim3: Sim3,
}

/// Absolute trajectory error between an (already aligned) estimate and the
/// ground truth.
pub fn ate(est_aligned: &Trajectory, gt: &Trajectory) -> Result<EvalReport> {
    if est_aligned.len() != gt.len() || est_aligned.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "trajectories must match and be non-empty: {} vs {}",
            est_aligned.len(),
            gt.len()
        )));
    }
    let mut rot = Vec::with_capacity(gt.len());
    let mut trans = Vec::with_capacity(gt.len());
    for (e, g) in est_aligned.poses.iter().zip(&gt.poses) {
        // Identical poses are exactly zero error; the trace formula would
        // amplify last-bit rounding through acos near 1.
        if e.r == g.r {
            rot.push(0.0);
        } else {
            let rel = g.rotation().transpose().mul_mat(&e.rotation());
            rot.push(rotation_angle(&rel)?.to_degrees());
        }
        trans.push(norm3(&sub3(&e.t, &g.t)) * 1000.0);
    }
    let mean_rot = rot.iter().sum::<f64>() / rot.len() as f64;
    let mean_trans = trans.iter().sum::<f64>() / trans.len() as f64;
    Ok(EvalReport {
        per_frame_rot_deg: rot,
        per_frame_trans: trans,
        mean_rot_deg: mean_rot,
        mean_trans,
        sim3: Sim3::identity(),
    })
}

/// 7-DoF alignment followed by ATE.
pub fn evaluate(est: &Trajectory, gt: &Trajectory) -> Result<EvalReport> {
    let (sim, aligned) = umeyama_align(est, gt)?;
    let mut report = ate(&aligned, gt)?;
    report.sim3 = sim;
    Ok(report)
}

/// Peak signal-to-noise ratio in dB over [0, 1] images; +inf for identical
/// images.
pub fn psnr(a: &ImageF64, b: &ImageF64) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::InvalidArgument(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Write poses as `<frame_id> <tx> <ty> <tz> <rx> <ry> <rz>` lines
/// (camera-to-world, axis-angle radians, bit-exact round trip).
pub fn write_poses(path: &Path, poses: &[Pose6]) -> Result<()> {
    let mut out = String::new();
    for (id, p) in poses.iter().enumerate() {
        out.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            id,
            fmt_f64(p.t[0]),
            fmt_f64(p.t[1]),
            fmt_f64(p.t[2]),
            fmt_f64(p.r[0]),
            fmt_f64(p.r[1]),
            fmt_f64(p.r[2])
        ));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// Read a pose file written by [`write_poses`]; frames must form a
/// contiguous 0..N-1 range with no duplicates. `#` starts a comment.
pub fn read_poses(path: &Path) -> Result<Vec<Pose6>> {
    let content = std::fs::read_to_string(path)?;
    let mut entries: Vec<(usize, Pose6)> = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        let lineno = lineno + 1;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected 7 fields, found {}", fields.len()),
            });
        }
        let id = parse_usize(fields[0], path, lineno)?;
        let t = [
            parse_f64(fields[1], path, lineno)?,
            parse_f64(fields[2], path, lineno)?,
            parse_f64(fields[3], path, lineno)?,
        ];
        let r = [
            parse_f64(fields[4], path, lineno)?,
            parse_f64(fields[5], path, lineno)?,
            parse_f64(fields[6], path, lineno)?,
        ];
        if entries.iter().any(|(eid, _)| *eid == id) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("duplicate frame id {id}"),
            });
        }
        entries.push((id, Pose6 { r, t }));
    }
    entries.sort_by_key(|(id, _)| *id);
    for (want, (got, _)) in entries.iter().enumerate() {
        if *got != want {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("frame ids are not contiguous: missing {want}"),
            });
        }
    }
    Ok(entries.into_iter().map(|(_, p)| p).collect())
}
