//! Rotation and pose algebra, fundamental-matrix construction, and the
//! Sampson distance.
//!
//! Everything in this module is a pure function over plain floats. These are
//! the untracked reference implementations used for inlier filtering,
//! evaluation, and as oracles for the differentiable counterparts in
//! [`crate::tracked`].

use crate::error::{Error, Result};

/// Denominator guard for the Sampson distance.
pub const SAMPSON_EPS: f64 = 1e-12;

/// Squared-angle threshold below which `rodrigues` switches to its
/// Taylor-series branch (angle < 1e-8 rad).
const SMALL_ANGLE_SQ: f64 = 1e-16;

pub type Vec3 = [f64; 3];
pub type Vec2 = [f64; 2];

pub fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: &Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn add3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale3(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn normalize3(a: &Vec3) -> Vec3 {
    let n = norm3(a);
    scale3(a, 1.0 / n)
}

fn finite3(a: &Vec3) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// 3x3 matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3 {
    pub m: [[f64; 3]; 3],
}

impl Mat3 {
    pub fn identity() -> Self {
        Mat3 {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn zeros() -> Self {
        Mat3 { m: [[0.0; 3]; 3] }
    }

    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Self {
        Mat3 { m: [r0, r1, r2] }
    }

    /// Skew-symmetric cross-product matrix `[t]_x` with `[t]_x v = t x v`.
    pub fn skew(t: &Vec3) -> Self {
        Mat3 {
            m: [
                [0.0, -t[2], t[1]],
                [t[2], 0.0, -t[0]],
                [-t[1], t[0], 0.0],
            ],
        }
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.m;
        Mat3 {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    pub fn mul_mat(&self, other: &Mat3) -> Mat3 {
        let mut out = Mat3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for (k, row) in other.m.iter().enumerate() {
                    s += self.m[i][k] * row[j];
                }
                out.m[i][j] = s;
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &Vec3) -> Vec3 {
        [
            dot3(&self.m[0], v),
            dot3(&self.m[1], v),
            dot3(&self.m[2], v),
        ]
    }

    pub fn scaled(&self, s: f64) -> Mat3 {
        let mut out = *self;
        for row in out.m.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        out
    }

    pub fn add(&self, other: &Mat3) -> Mat3 {
        let mut out = *self;
        for i in 0..3 {
            for j in 0..3 {
                out.m[i][j] += other.m[i][j];
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        self.m[0][0] + self.m[1][1] + self.m[2][2]
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.m
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
    }

    /// Max absolute deviation of `R^T R` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let rtr = self.transpose().mul_mat(self);
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((rtr.m[i][j] - target).abs());
            }
        }
        err
    }

    pub fn is_rotation(&self, tol: f64) -> bool {
        self.is_finite() && self.orthonormality_error() <= tol && (self.det() - 1.0).abs() <= tol
    }
}

/// Camera pose as axis-angle rotation plus translation, camera-to-world.
///
/// The translation is the camera centre; rotating a camera-frame direction
/// by `r` gives a world-frame direction. Canonical form `||r|| <= pi` is
/// enforced on construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6 {
    pub r: Vec3,
    pub t: Vec3,
}

impl Pose6 {
    pub fn new(r: Vec3, t: Vec3) -> Result<Self> {
        if !finite3(&r) || !finite3(&t) {
            return Err(Error::InvalidArgument(format!(
                "pose components must be finite, got r={r:?} t={t:?}"
            )));
        }
        Ok(Pose6 {
            r: canonicalize_axis_angle(&r),
            t,
        })
    }

    pub fn identity() -> Self {
        Pose6 {
            r: [0.0; 3],
            t: [0.0; 3],
        }
    }

    pub fn rotation(&self) -> Mat3 {
        rodrigues(&self.r).expect("canonical pose has finite rotation")
    }

    /// Camera centre in world coordinates (alias for the translation).
    pub fn centre(&self) -> Vec3 {
        self.t
    }

    /// World point to camera coordinates.
    pub fn world_to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation().transpose().mul_vec(&sub3(x, &self.t))
    }

    /// Camera point to world coordinates.
    pub fn camera_to_world(&self, x: &Vec3) -> Vec3 {
        add3(&self.rotation().mul_vec(x), &self.t)
    }
}

/// Wrap an axis-angle vector so its norm lies in `[0, pi]`.
///
/// Vectors already in canonical form are returned bit-unchanged.
pub fn canonicalize_axis_angle(r: &Vec3) -> Vec3 {
    let theta = norm3(r);
    if theta <= std::f64::consts::PI {
        return *r;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut wrapped = theta.rem_euclid(two_pi);
    if wrapped > std::f64::consts::PI {
        wrapped -= two_pi;
    }
    scale3(r, wrapped / theta)
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({cx}, {cy}) outside image {width}x{height}"
            )));
        }
        Ok(Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn k_matrix(&self) -> Mat3 {
        Mat3::from_rows(
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        )
    }

    pub fn k_inv(&self) -> Mat3 {
        Mat3::from_rows(
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        )
    }

    /// Unit-norm camera-frame ray direction through a pixel coordinate.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vec3 {
        normalize3(&[(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }
}

/// Axis-angle to rotation matrix.
///
/// Rotating by `r` means rotating by angle `||r||` about `r / ||r||`.
/// A Taylor branch handles `||r|| < 1e-8`.
pub fn rodrigues(r: &Vec3) -> Result<Mat3> {
    if !finite3(r) {
        return Err(Error::InvalidArgument(format!(
            "axis-angle must be finite, got {r:?}"
        )));
    }
    let theta_sq = dot3(r, r);
    // a = sin(theta)/theta, b = (1 - cos(theta))/theta^2
    let (a, b) = if theta_sq < SMALL_ANGLE_SQ {
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        let theta = theta_sq.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq)
    };
    let k = Mat3::skew(r);
    let k2 = k.mul_mat(&k);
    Ok(Mat3::identity().add(&k.scaled(a)).add(&k2.scaled(b)))
}

/// Rotation angle of a rotation matrix, in `[0, pi]`.
pub fn rotation_angle(rm: &Mat3) -> Result<f64> {
    if !rm.is_rotation(1e-9) {
        return Err(Error::InvalidArgument(
            "matrix is not a rotation".to_string(),
        ));
    }
    Ok(((rm.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos())
}

/// Rotation matrix to canonical axis-angle (inverse of `rodrigues`).
///
/// Goes through a quaternion so the extraction stays stable near pi.
pub fn rotation_log(rm: &Mat3) -> Result<Vec3> {
    if !rm.is_rotation(1e-9) {
        return Err(Error::InvalidArgument(
            "matrix is not a rotation".to_string(),
        ));
    }
    let m = &rm.m;
    let trace = rm.trace();
    // Shepperd's method: branch on the largest of trace and diagonal entries.
    let (w, x, y, z);
    if trace > m[0][0] && trace > m[1][1] && trace > m[2][2] {
        let s = (trace + 1.0).sqrt() * 2.0;
        w = 0.25 * s;
        x = (m[2][1] - m[1][2]) / s;
        y = (m[0][2] - m[2][0]) / s;
        z = (m[1][0] - m[0][1]) / s;
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        w = (m[2][1] - m[1][2]) / s;
        x = 0.25 * s;
        y = (m[0][1] + m[1][0]) / s;
        z = (m[0][2] + m[2][0]) / s;
    } else if m[1][1] > m[2][2] {
        let s = (1.0 - m[0][0] + m[1][1] - m[2][2]).sqrt() * 2.0;
        w = (m[0][2] - m[2][0]) / s;
        x = (m[0][1] + m[1][0]) / s;
        y = 0.25 * s;
        z = (m[1][2] + m[2][1]) / s;
    } else {
        let s = (1.0 - m[0][0] - m[1][1] + m[2][2]).sqrt() * 2.0;
        w = (m[1][0] - m[0][1]) / s;
        x = (m[0][2] + m[2][0]) / s;
        y = (m[1][2] + m[2][1]) / s;
        z = 0.25 * s;
    }
    let qv = [x, y, z];
    let qv_norm = norm3(&qv);
    if qv_norm < 1e-12 {
        return Ok([0.0; 3]);
    }
    // Angle in [0, pi] when w >= 0; flip the quaternion sign otherwise.
    let (w, qv) = if w < 0.0 {
        (-w, scale3(&qv, -1.0))
    } else {
        (w, qv)
    };
    let angle = 2.0 * qv_norm.atan2(w);
    Ok(canonicalize_axis_angle(&scale3(&qv, angle / qv_norm)))
}

/// Transform taking frame-i camera coordinates to frame-j camera coordinates.
///
/// `R_rel = R_j^T R_i`, `t_rel = R_j^T (t_i - t_j)`.
pub fn relative_pose(pose_i: &Pose6, pose_j: &Pose6) -> (Mat3, Vec3) {
    let r_i = pose_i.rotation();
    let r_j_t = pose_j.rotation().transpose();
    let r_rel = r_j_t.mul_mat(&r_i);
    let t_rel = r_j_t.mul_vec(&sub3(&pose_i.t, &pose_j.t));
    (r_rel, t_rel)
}

/// Fundamental matrix mapping frame-i pixels to epipolar lines in frame j,
/// scaled to unit Frobenius norm.
pub fn fundamental_matrix(
    pose_i: &Pose6,
    pose_j: &Pose6,
    k_i: &Intrinsics,
    k_j: &Intrinsics,
) -> Result<Mat3> {
    let (r_rel, t_rel) = relative_pose(pose_i, pose_j);
    if norm3(&t_rel) <= 1e-12 {
        return Err(Error::DegenerateGeometry(
            "zero baseline between frames".to_string(),
        ));
    }
    let f = k_j
        .k_inv()
        .transpose()
        .mul_mat(&Mat3::skew(&t_rel))
        .mul_mat(&r_rel)
        .mul_mat(&k_i.k_inv());
    Ok(f.scaled(1.0 / f.frobenius_norm()))
}

/// First-order squared geometric distance of a correspondence to the
/// epipolar constraint, in squared pixels.
pub fn sampson_distance(x: &Vec2, x_prime: &Vec2, f: &Mat3) -> Result<f64> {
    if !x.iter().chain(x_prime.iter()).all(|v| v.is_finite()) || !f.is_finite() {
        return Err(Error::InvalidArgument(
            "sampson inputs must be finite".to_string(),
        ));
    }
    if f.m.iter().flatten().all(|v| *v == 0.0) {
        return Err(Error::InvalidArgument(
            "fundamental matrix is all zeros".to_string(),
        ));
    }
    let xh = [x[0], x[1], 1.0];
    let xph = [x_prime[0], x_prime[1], 1.0];
    let fx = f.mul_vec(&xh);
    let ftxp = f.transpose().mul_vec(&xph);
    let num = dot3(&xph, &fx);
    let den = fx[0] * fx[0] + fx[1] * fx[1] + ftxp[0] * ftxp[0] + ftxp[1] * ftxp[1] + SAMPSON_EPS;
    Ok(num * num / den)
}

/// Additive pose-residual composition in axis-angle/translation space:
/// `r_hat = r + alpha * dr`, `t_hat = t + alpha * dt`, re-canonicalized.
pub fn compose_residual(initial: &Pose6, residual: &[f64; 6], alpha: f64) -> Result<Pose6> {
    if !residual.iter().all(|v| v.is_finite()) || !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "residual must be finite and alpha positive, got alpha={alpha}"
        )));
    }
    Pose6::new(
        [
            initial.r[0] + alpha * residual[0],
            initial.r[1] + alpha * residual[1],
            initial.r[2] + alpha * residual[2],
        ],
        [
            initial.t[0] + alpha * residual[3],
            initial.t[1] + alpha * residual[4],
            initial.t[2] + alpha * residual[5],
        ],
    )
}

/// Project a world point into a camera; `None` when behind the camera.
pub fn project(pose: &Pose6, k: &Intrinsics, x_world: &Vec3) -> Option<Vec2> {
    let xc = pose.world_to_camera(x_world);
    if xc[2] <= 1e-9 {
        return None;
    }
    Some([
        k.fx * xc[0] / xc[2] + k.cx,
        k.fy * xc[1] / xc[2] + k.cy,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_axis_angle(rng: &mut impl Rng, max_angle: f64) -> Vec3 {
        let axis = normalize3(&[
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ]);
        scale3(&axis, rng.random_range(0.0..max_angle))
    }

    fn random_pose(rng: &mut impl Rng) -> Pose6 {
        Pose6::new(
            random_axis_angle(rng, PI * 0.95),
            [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn rodrigues_zero_is_identity() {
        let r = rodrigues(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(r, Mat3::identity());
    }

    #[test]
    fn rodrigues_quarter_turn_about_z() {
        let r = rodrigues(&[0.0, 0.0, PI / 2.0]).unwrap();
        let v = r.mul_vec(&[1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(v[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[2], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn rodrigues_rejects_non_finite() {
        assert!(rodrigues(&[f64::NAN, 0.0, 0.0]).is_err());
        assert!(rodrigues(&[0.0, f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn rodrigues_matches_quaternion_oracle() {
        // Independent oracle: axis-angle -> unit quaternion -> rotation matrix.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let v = random_axis_angle(&mut rng, PI);
            let ours = rodrigues(&v).unwrap();
            let q = nalgebra::UnitQuaternion::from_scaled_axis(nalgebra::Vector3::new(
                v[0], v[1], v[2],
            ));
            let oracle = q.to_rotation_matrix();
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(ours.m[i][j], oracle[(i, j)], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn rodrigues_small_angle_branch_is_orthonormal() {
        let v = [3e-9, -4e-9, 1e-9];
        let r = rodrigues(&v).unwrap();
        assert!(r.is_rotation(1e-12));
    }

    #[test]
    fn rotation_angle_basics() {
        assert_abs_diff_eq!(rotation_angle(&Mat3::identity()).unwrap(), 0.0);
        let r = rodrigues(&[0.0, 0.0, PI / 2.0]).unwrap();
        assert_abs_diff_eq!(rotation_angle(&r).unwrap(), PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_angle_rejects_non_rotation() {
        let m = Mat3::from_rows([2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]);
        assert!(rotation_angle(&m).is_err());
    }

    #[test]
    fn rotation_angle_roundtrips_rodrigues() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let v = random_axis_angle(&mut rng, PI);
            let angle = rotation_angle(&rodrigues(&v).unwrap()).unwrap();
            assert_abs_diff_eq!(angle, norm3(&v), epsilon = 1e-9);
        }
    }

    #[test]
    fn rotation_log_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..500 {
            let v = random_axis_angle(&mut rng, PI * 0.999);
            let back = rotation_log(&rodrigues(&v).unwrap()).unwrap();
            for k in 0..3 {
                assert_abs_diff_eq!(back[k], v[k], epsilon = 1e-9);
            }
        }
        // Near-pi branch.
        let v = scale3(&normalize3(&[1.0, 2.0, -0.5]), PI - 1e-9);
        let back = rotation_log(&rodrigues(&v).unwrap()).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(back[k], v[k], epsilon = 1e-6);
        }
    }

    #[test]
    fn canonicalize_wraps_long_rotations() {
        let axis = normalize3(&[0.3, -0.2, 0.9]);
        let r = scale3(&axis, 1.5 * PI);
        let wrapped = canonicalize_axis_angle(&r);
        assert_abs_diff_eq!(norm3(&wrapped), 0.5 * PI, epsilon = 1e-12);
        // Same rotation matrix either way.
        let ra = rodrigues(&r).unwrap();
        let rb = rodrigues(&wrapped).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(ra.m[i][j], rb.m[i][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn relative_pose_identity_for_equal_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_pose(&mut rng);
        let (r, t) = relative_pose(&p, &p);
        assert!(r.orthonormality_error() < 1e-12);
        assert_abs_diff_eq!(rotation_angle(&r).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(norm3(&t), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn relative_pose_pure_translation() {
        let a = Pose6::identity();
        let b = Pose6::new([0.0; 3], [1.0, 0.0, 0.0]).unwrap();
        let (r, t) = relative_pose(&a, &b);
        assert_eq!(r, Mat3::identity());
        assert_eq!(t, [-1.0, 0.0, 0.0]);
    }

    #[test]
    fn relative_pose_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (pi, pj, pk) = (
                random_pose(&mut rng),
                random_pose(&mut rng),
                random_pose(&mut rng),
            );
            let (r_ij, t_ij) = relative_pose(&pi, &pj);
            let (r_jk, t_jk) = relative_pose(&pj, &pk);
            let (r_ik, t_ik) = relative_pose(&pi, &pk);
            let r_comp = r_jk.mul_mat(&r_ij);
            let t_comp = add3(&r_jk.mul_vec(&t_ij), &t_jk);
            for i in 0..3 {
                assert_abs_diff_eq!(t_comp[i], t_ik[i], epsilon = 1e-10);
                for j in 0..3 {
                    assert_abs_diff_eq!(r_comp.m[i][j], r_ik.m[i][j], epsilon = 1e-10);
                }
            }
        }
    }

    fn unit_intrinsics() -> Intrinsics {
        // fx = fy = 1, principal point just inside a nominal 2x2 image.
        Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 2,
            height: 2,
        }
    }

    #[test]
    fn fundamental_pure_translation_shape() {
        let k = unit_intrinsics();
        let a = Pose6::identity();
        let b = Pose6::new([0.0; 3], [1.0, 0.0, 0.0]).unwrap();
        let f = fundamental_matrix(&a, &b, &k, &k).unwrap();
        // Proportional to [[0,0,0],[0,0,-1],[0,1,0]] up to sign.
        let expected = [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]];
        let sign = if f.m[1][2] * expected[1][2] >= 0.0 { 1.0 } else { -1.0 };
        let scale = sign / 2.0f64.sqrt();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(f.m[i][j], expected[i][j] * scale, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fundamental_zero_baseline_is_degenerate() {
        let k = unit_intrinsics();
        let a = Pose6::new([0.1, 0.2, 0.3], [1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            fundamental_matrix(&a, &a, &k, &k),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    fn bench_intrinsics() -> Intrinsics {
        Intrinsics::new(120.0, 115.0, 64.0, 48.0, 128, 96).unwrap()
    }

    #[test]
    fn fundamental_annihilates_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = bench_intrinsics();
        for _ in 0..100 {
            // Cameras looking roughly at the origin from radius ~2.
            let pa = look_at_pose(&mut rng);
            let pb = look_at_pose(&mut rng);
            let f = fundamental_matrix(&pa, &pb, &k, &k).unwrap();
            for _ in 0..20 {
                let x_world = [
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                ];
                let (Some(xa), Some(xb)) =
                    (project(&pa, &k, &x_world), project(&pb, &k, &x_world))
                else {
                    continue;
                };
                let xh = [xa[0], xa[1], 1.0];
                let xph = [xb[0], xb[1], 1.0];
                let val = dot3(&xph, &f.mul_vec(&xh));
                assert!(val.abs() < 1e-9, "epipolar constraint violated: {val}");
            }
        }
    }

    fn look_at_pose(rng: &mut impl Rng) -> Pose6 {
        // Camera on a sphere of radius 2, optical axis through the origin.
        let centre = scale3(
            &normalize3(&[
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]),
            2.0,
        );
        let forward = normalize3(&scale3(&centre, -1.0));
        let up = [0.0, 1.0, 0.0];
        let right = normalize3(&cross3(&up, &forward));
        let down = cross3(&forward, &right);
        let rm = Mat3::from_rows(
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        );
        Pose6::new(rotation_log(&rm).unwrap(), centre).unwrap()
    }

    #[test]
    fn fundamental_swap_is_transpose_up_to_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let k = bench_intrinsics();
        for _ in 0..50 {
            let pa = look_at_pose(&mut rng);
            let pb = look_at_pose(&mut rng);
            let f_ij = fundamental_matrix(&pa, &pb, &k, &k).unwrap();
            let f_ji = fundamental_matrix(&pb, &pa, &k, &k).unwrap();
            let ft = f_ij.transpose();
            // Both unit Frobenius, so they agree up to sign.
            let mut best = (0.0f64, 0usize, 0usize);
            for i in 0..3 {
                for j in 0..3 {
                    if ft.m[i][j].abs() > best.0 {
                        best = (ft.m[i][j].abs(), i, j);
                    }
                }
            }
            let sign = (f_ji.m[best.1][best.2] / ft.m[best.1][best.2]).signum();
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(f_ji.m[i][j], sign * ft.m[i][j], epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn fundamental_is_rank_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let k = bench_intrinsics();
        for _ in 0..100 {
            let pa = look_at_pose(&mut rng);
            let pb = look_at_pose(&mut rng);
            let f = fundamental_matrix(&pa, &pb, &k, &k).unwrap();
            let na = nalgebra::Matrix3::from_fn(|i, j| f.m[i][j]);
            let svals = na.svd(false, false).singular_values;
            assert!(svals[2] <= 1e-9 * svals[0]);
        }
    }

    #[test]
    fn sampson_zero_on_constraint() {
        // Points on the epipolar line of a pure-translation F.
        let f = Mat3::from_rows([0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]);
        let d = sampson_distance(&[0.3, 0.7], &[0.9, 0.7], &f).unwrap();
        assert_abs_diff_eq!(d, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn sampson_hand_built_case() {
        // Direct evaluation with F = [[0,0,0],[0,0,-1],[0,1,0]], x = (0,0),
        // x' = (0, 0.2): numerator (-0.2)^2, denominator 1 + 1.
        let f = Mat3::from_rows([0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]);
        let d = sampson_distance(&[0.0, 0.0], &[0.0, 0.2], &f).unwrap();
        assert_abs_diff_eq!(d, 0.02, epsilon = 1e-12);
    }

    #[test]
    fn sampson_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..500 {
            let f = Mat3::from_rows(
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            );
            let x = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
            let xp = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
            let d1 = sampson_distance(&x, &xp, &f).unwrap();
            let d2 = sampson_distance(&x, &xp, &f.scaled(5.0)).unwrap();
            let denom = d1.abs().max(1e-30);
            assert!(((d1 - d2) / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn sampson_rejects_zero_f() {
        assert!(sampson_distance(&[0.0, 0.0], &[1.0, 1.0], &Mat3::zeros()).is_err());
    }

    #[test]
    fn compose_zero_residual_is_identity() {
        let p = Pose6::new([0.2, -0.4, 0.8], [1.0, 2.0, 3.0]).unwrap();
        let q = compose_residual(&p, &[0.0; 6], 0.01).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn compose_direct_expansion() {
        let p = Pose6::new([0.0; 3], [1.0, 2.0, 3.0]).unwrap();
        let q = compose_residual(&p, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0], 0.01).unwrap();
        assert_eq!(q.r, [0.01, 0.0, 0.0]);
        assert_eq!(q.t, [1.0, 2.0, 3.01]);
    }

    #[test]
    fn compose_first_order_in_alpha() {
        let p = Pose6::new([0.1, 0.2, -0.3], [0.5, -0.5, 1.0]).unwrap();
        let res = [0.3, -0.7, 0.2, 0.4, 0.1, -0.9];
        let mut alpha = 1e-4;
        while alpha <= 0.1 {
            let q = compose_residual(&p, &res, alpha).unwrap();
            for k in 0..3 {
                assert_abs_diff_eq!(q.r[k] - p.r[k], alpha * res[k], epsilon = 1e-15);
                assert_abs_diff_eq!(q.t[k] - p.t[k], alpha * res[k + 3], epsilon = 1e-15);
            }
            alpha *= 10.0;
        }
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 2, 2).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 3.0, 1.0, 2, 2).is_err());
        assert!(Intrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).is_ok());
    }
}
