//! Differentiable counterparts of the pose/epipolar geometry: rotations,
//! relative poses, fundamental matrices, and the Sampson distance recorded
//! on the tape so losses can backpropagate into pose parameters.
//!
//! Values agree with the untracked reference implementations in
//! [`crate::se3`] to within rounding.

use crate::autodiff::{Tape, Var};
use crate::se3::{Intrinsics, Mat3, Pose6, SAMPSON_EPS};

/// Squared-angle threshold for the Taylor branch (matches `se3::rodrigues`).
const SMALL_ANGLE_SQ: f64 = 1e-16;

#[derive(Debug, Clone, Copy)]
pub struct TrackedPose {
    pub r: [Var; 3],
    pub t: [Var; 3],
}

impl TrackedPose {
    pub fn from_constants(tape: &mut Tape, pose: &Pose6) -> Self {
        TrackedPose {
            r: [
                tape.constant(pose.r[0]),
                tape.constant(pose.r[1]),
                tape.constant(pose.r[2]),
            ],
            t: [
                tape.constant(pose.t[0]),
                tape.constant(pose.t[1]),
                tape.constant(pose.t[2]),
            ],
        }
    }

    pub fn from_leaves(tape: &mut Tape, pose: &Pose6) -> Self {
        TrackedPose {
            r: [tape.leaf(pose.r[0]), tape.leaf(pose.r[1]), tape.leaf(pose.r[2])],
            t: [tape.leaf(pose.t[0]), tape.leaf(pose.t[1]), tape.leaf(pose.t[2])],
        }
    }

    /// Current values as a plain pose (assumed already canonical).
    pub fn value(&self, tape: &Tape) -> Pose6 {
        Pose6 {
            r: [tape.val(self.r[0]), tape.val(self.r[1]), tape.val(self.r[2])],
            t: [tape.val(self.t[0]), tape.val(self.t[1]), tape.val(self.t[2])],
        }
    }
}

pub type TrackedMat3 = [[Var; 3]; 3];

pub fn mat3_values(tape: &Tape, m: &TrackedMat3) -> Mat3 {
    let mut out = Mat3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            out.m[i][j] = tape.val(m[i][j]);
        }
    }
    out
}

/// Tracked axis-angle to rotation matrix, Taylor branch included.
pub fn rodrigues_tracked(tape: &mut Tape, r: &[Var; 3]) -> TrackedMat3 {
    let r00 = tape.mul(r[0], r[0]);
    let r11 = tape.mul(r[1], r[1]);
    let r22 = tape.mul(r[2], r[2]);
    let s01 = tape.add(r00, r11);
    let theta_sq = tape.add(s01, r22);

    // a = sin(theta)/theta, b = (1-cos(theta))/theta^2
    let (a, b) = if tape.val(theta_sq) < SMALL_ANGLE_SQ {
        let t4 = tape.mul(theta_sq, theta_sq);
        let u = tape.mul_c(theta_sq, -1.0 / 6.0);
        let v = tape.mul_c(t4, 1.0 / 120.0);
        let uv = tape.add(u, v);
        let a = tape.add_c(uv, 1.0);
        let u2 = tape.mul_c(theta_sq, -1.0 / 24.0);
        let v2 = tape.mul_c(t4, 1.0 / 720.0);
        let uv2 = tape.add(u2, v2);
        let b = tape.add_c(uv2, 0.5);
        (a, b)
    } else {
        let theta = tape.sqrt(theta_sq);
        let s = tape.sin(theta);
        let c = tape.cos(theta);
        let a = tape.div(s, theta);
        let omc = tape.c_sub(1.0, c);
        let b = tape.div(omc, theta_sq);
        (a, b)
    };

    let p01 = tape.mul(r[0], r[1]);
    let p02 = tape.mul(r[0], r[2]);
    let p12 = tape.mul(r[1], r[2]);

    let diag = |tape: &mut Tape, u: Var, v: Var| {
        let s = tape.add(u, v);
        let bs = tape.mul(b, s);
        tape.c_sub(1.0, bs)
    };
    let m00 = diag(tape, r11, r22);
    let m11 = diag(tape, r00, r22);
    let m22 = diag(tape, r00, r11);

    // off-diagonals: b * (r_i r_j) +/- a * r_k
    let off = |tape: &mut Tape, prod: Var, axis: Var, plus: bool| {
        let bp = tape.mul(b, prod);
        let aa = tape.mul(a, axis);
        if plus {
            tape.add(bp, aa)
        } else {
            tape.sub(bp, aa)
        }
    };
    let m01 = off(tape, p01, r[2], false);
    let m02 = off(tape, p02, r[1], true);
    let m10 = off(tape, p01, r[2], true);
    let m12 = off(tape, p12, r[0], false);
    let m20 = off(tape, p02, r[1], false);
    let m21 = off(tape, p12, r[0], true);

    [[m00, m01, m02], [m10, m11, m12], [m20, m21, m22]]
}

/// Wrap a tracked axis-angle into `||r|| <= pi` when its current value is
/// outside; a no-op (the same nodes) otherwise.
pub fn canonicalize_tracked(tape: &mut Tape, r: [Var; 3]) -> [Var; 3] {
    let norm_val = (tape.val(r[0]).powi(2) + tape.val(r[1]).powi(2) + tape.val(r[2]).powi(2)).sqrt();
    if norm_val <= std::f64::consts::PI {
        return r;
    }
    let r0s = tape.mul(r[0], r[0]);
    let r1s = tape.mul(r[1], r[1]);
    let r2s = tape.mul(r[2], r[2]);
    let s01 = tape.add(r0s, r1s);
    let nsq = tape.add(s01, r2s);
    let n = tape.sqrt(nsq);
    let shifted = tape.add_c(n, -2.0 * std::f64::consts::PI);
    let scale = tape.div(shifted, n);
    [
        tape.mul(r[0], scale),
        tape.mul(r[1], scale),
        tape.mul(r[2], scale),
    ]
}

/// `R_rel = R_j^T R_i`, `t_rel = R_j^T (t_i - t_j)` with tracked poses.
pub fn relative_pose_tracked(
    tape: &mut Tape,
    pose_i: &TrackedPose,
    pose_j: &TrackedPose,
) -> (TrackedMat3, [Var; 3]) {
    let r_i = rodrigues_tracked(tape, &pose_i.r);
    let r_j = rodrigues_tracked(tape, &pose_j.r);
    let mut rel = [[Var(0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            // sum_k R_j[k][i] * R_i[k][j]
            let p0 = tape.mul(r_j[0][i], r_i[0][j]);
            let p1 = tape.mul(r_j[1][i], r_i[1][j]);
            let p2 = tape.mul(r_j[2][i], r_i[2][j]);
            let s = tape.add(p0, p1);
            rel[i][j] = tape.add(s, p2);
        }
    }
    let d = [
        tape.sub(pose_i.t[0], pose_j.t[0]),
        tape.sub(pose_i.t[1], pose_j.t[1]),
        tape.sub(pose_i.t[2], pose_j.t[2]),
    ];
    let mut t_rel = [Var(0); 3];
    for (i, t) in t_rel.iter_mut().enumerate() {
        let p0 = tape.mul(r_j[0][i], d[0]);
        let p1 = tape.mul(r_j[1][i], d[1]);
        let p2 = tape.mul(r_j[2][i], d[2]);
        let s = tape.add(p0, p1);
        *t = tape.add(s, p2);
    }
    (rel, t_rel)
}

/// Tracked fundamental matrix `K_j^-T [t]_x R K_i^-1`, unit Frobenius norm.
///
/// Returns `None` for a near-zero baseline (checked on the current values).
pub fn fundamental_tracked(
    tape: &mut Tape,
    pose_i: &TrackedPose,
    pose_j: &TrackedPose,
    k_i: &Intrinsics,
    k_j: &Intrinsics,
) -> Option<TrackedMat3> {
    let (r_rel, t_rel) = relative_pose_tracked(tape, pose_i, pose_j);
    let baseline_sq = tape.val(t_rel[0]).powi(2)
        + tape.val(t_rel[1]).powi(2)
        + tape.val(t_rel[2]).powi(2);
    if baseline_sq <= 1e-24 {
        return None;
    }
    // A = [t]_x * R_rel
    let mut a = [[Var(0); 3]; 3];
    for j in 0..3 {
        let p0 = tape.mul(t_rel[2], r_rel[1][j]);
        let p1 = tape.mul(t_rel[1], r_rel[2][j]);
        a[0][j] = tape.sub(p1, p0); // -t2*R1j + t1*R2j
        let p2 = tape.mul(t_rel[2], r_rel[0][j]);
        let p3 = tape.mul(t_rel[0], r_rel[2][j]);
        a[1][j] = tape.sub(p2, p3); // t2*R0j - t0*R2j
        let p4 = tape.mul(t_rel[1], r_rel[0][j]);
        let p5 = tape.mul(t_rel[0], r_rel[1][j]);
        a[2][j] = tape.sub(p5, p4); // -t1*R0j + t0*R1j
    }
    // F0 = K_j^-T * A * K_i^-1 with constant intrinsics folded in.
    let kjt = k_j.k_inv().transpose();
    let kii = k_i.k_inv();
    let mut left = [[Var(0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc: Option<Var> = None;
            for k in 0..3 {
                let c = kjt.m[i][k];
                if c == 0.0 {
                    continue;
                }
                let term = tape.mul_c(a[k][j], c);
                acc = Some(match acc {
                    None => term,
                    Some(prev) => tape.add(prev, term),
                });
            }
            left[i][j] = acc.expect("K^-T rows are non-zero");
        }
    }
    let mut f = [[Var(0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc: Option<Var> = None;
            for k in 0..3 {
                let c = kii.m[k][j];
                if c == 0.0 {
                    continue;
                }
                let term = tape.mul_c(left[i][k], c);
                acc = Some(match acc {
                    None => term,
                    Some(prev) => tape.add(prev, term),
                });
            }
            f[i][j] = acc.expect("K^-1 columns are non-zero");
        }
    }
    // Normalize to unit Frobenius norm.
    let mut norm_sq: Option<Var> = None;
    for row in &f {
        for &v in row {
            let sq = tape.mul(v, v);
            norm_sq = Some(match norm_sq {
                None => sq,
                Some(prev) => tape.add(prev, sq),
            });
        }
    }
    let norm = tape.sqrt(norm_sq.unwrap());
    let mut out = [[Var(0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = tape.div(f[i][j], norm);
        }
    }
    Some(out)
}

/// Tracked Sampson distance of a pixel correspondence under a tracked F.
pub fn sampson_tracked(tape: &mut Tape, x: &[f64; 2], x_prime: &[f64; 2], f: &TrackedMat3) -> Var {
    let line = |tape: &mut Tape, a: Var, b: Var, c: Var, u: f64, v: f64| {
        let t1 = tape.mul_c(a, u);
        let t2 = tape.mul_c(b, v);
        let s = tape.add(t1, t2);
        tape.add(s, c)
    };
    let fx = [
        line(tape, f[0][0], f[0][1], f[0][2], x[0], x[1]),
        line(tape, f[1][0], f[1][1], f[1][2], x[0], x[1]),
        line(tape, f[2][0], f[2][1], f[2][2], x[0], x[1]),
    ];
    let ftxp = [
        line(tape, f[0][0], f[1][0], f[2][0], x_prime[0], x_prime[1]),
        line(tape, f[0][1], f[1][1], f[2][1], x_prime[0], x_prime[1]),
    ];
    // numerator: x'^T (F x)
    let n0 = tape.mul_c(fx[0], x_prime[0]);
    let n1 = tape.mul_c(fx[1], x_prime[1]);
    let n01 = tape.add(n0, n1);
    let num = tape.add(n01, fx[2]);
    let num_sq = tape.mul(num, num);
    let d0 = tape.mul(fx[0], fx[0]);
    let d1 = tape.mul(fx[1], fx[1]);
    let d2 = tape.mul(ftxp[0], ftxp[0]);
    let d3 = tape.mul(ftxp[1], ftxp[1]);
    let s01 = tape.add(d0, d1);
    let s23 = tape.add(d2, d3);
    let s = tape.add(s01, s23);
    let den = tape.add_c(s, SAMPSON_EPS);
    tape.div(num_sq, den)
}

/// World-space ray through a pixel for a tracked camera-to-world pose:
/// origin is the (tracked) camera centre, direction is the rotated
/// (constant, unit-norm) camera-frame pixel direction.
pub fn ray_through_pixel(
    tape: &mut Tape,
    rot: &TrackedMat3,
    centre: &[Var; 3],
    dir_cam: &[f64; 3],
) -> ([Var; 3], [Var; 3]) {
    let mut dir = [Var(0); 3];
    for (i, d) in dir.iter_mut().enumerate() {
        let mut acc: Option<Var> = None;
        for (j, &c) in dir_cam.iter().enumerate() {
            let term = tape.mul_c(rot[i][j], c);
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term),
            });
        }
        *d = acc.unwrap();
    }
    (*centre, dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_gradient;
    use crate::se3;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_pose(rng: &mut impl Rng) -> Pose6 {
        let axis = se3::normalize3(&[
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ]);
        Pose6::new(
            se3::scale3(&axis, rng.random_range(0.0..PI * 0.9)),
            [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn rodrigues_tracked_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let reference = se3::rodrigues(&pose.r).unwrap();
            let mut tape = Tape::new();
            let r = [
                tape.leaf(pose.r[0]),
                tape.leaf(pose.r[1]),
                tape.leaf(pose.r[2]),
            ];
            let rm = rodrigues_tracked(&mut tape, &r);
            let got = mat3_values(&tape, &rm);
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(got.m[i][j], reference.m[i][j], epsilon = 1e-14);
                }
            }
        }
        // Small-angle branch.
        let mut tape = Tape::new();
        let r = [tape.leaf(1e-9), tape.leaf(-2e-9), tape.leaf(0.5e-9)];
        let rm = rodrigues_tracked(&mut tape, &r);
        let got = mat3_values(&tape, &rm);
        let reference = se3::rodrigues(&[1e-9, -2e-9, 0.5e-9]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(got.m[i][j], reference.m[i][j], epsilon = 1e-16);
            }
        }
    }

    #[test]
    fn rodrigues_tracked_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            // Scalar objective: weighted sum of entries.
            let weights: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let eval = |rv: &[f64]| {
                let rm = se3::rodrigues(&[rv[0], rv[1], rv[2]]).unwrap();
                rm.m.iter()
                    .flatten()
                    .zip(&weights)
                    .map(|(v, w)| v * w)
                    .sum::<f64>()
            };
            let fd = finite_diff_gradient(eval, &pose.r, 1e-6);
            let mut tape = Tape::new();
            let r = [
                tape.leaf(pose.r[0]),
                tape.leaf(pose.r[1]),
                tape.leaf(pose.r[2]),
            ];
            let rm = rodrigues_tracked(&mut tape, &r);
            let mut total: Option<Var> = None;
            for i in 0..3 {
                for j in 0..3 {
                    let term = tape.mul_c(rm[i][j], weights[i * 3 + j]);
                    total = Some(match total {
                        None => term,
                        Some(prev) => tape.add(prev, term),
                    });
                }
            }
            tape.backward(total.unwrap(), &[], &mut []).unwrap();
            for k in 0..3 {
                let g = tape.adjoint(r[k]);
                let denom = g.abs().max(fd[k].abs()).max(1e-6);
                assert!(((g - fd[k]) / denom).abs() < 1e-5, "{g} vs {}", fd[k]);
            }
        }
    }

    #[test]
    fn fundamental_tracked_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Intrinsics::new(110.0, 105.0, 48.0, 36.0, 96, 72).unwrap();
        for _ in 0..50 {
            let pa = random_pose(&mut rng);
            let pb = random_pose(&mut rng);
            let reference = match se3::fundamental_matrix(&pa, &pb, &k, &k) {
                Ok(f) => f,
                Err(_) => continue,
            };
            let mut tape = Tape::new();
            let ta = TrackedPose::from_leaves(&mut tape, &pa);
            let tb = TrackedPose::from_leaves(&mut tape, &pb);
            let f = fundamental_tracked(&mut tape, &ta, &tb, &k, &k).unwrap();
            let got = mat3_values(&tape, &f);
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(got.m[i][j], reference.m[i][j], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn sampson_tracked_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = Intrinsics::new(110.0, 105.0, 48.0, 36.0, 96, 72).unwrap();
        for _ in 0..50 {
            let pa = random_pose(&mut rng);
            let pb = random_pose(&mut rng);
            let Ok(f_ref) = se3::fundamental_matrix(&pa, &pb, &k, &k) else {
                continue;
            };
            let x = [rng.random_range(0.0..96.0), rng.random_range(0.0..72.0)];
            let xp = [rng.random_range(0.0..96.0), rng.random_range(0.0..72.0)];
            let want = se3::sampson_distance(&x, &xp, &f_ref).unwrap();
            let mut tape = Tape::new();
            let ta = TrackedPose::from_leaves(&mut tape, &pa);
            let tb = TrackedPose::from_leaves(&mut tape, &pb);
            let f = fundamental_tracked(&mut tape, &ta, &tb, &k, &k).unwrap();
            let d = sampson_tracked(&mut tape, &x, &xp, &f);
            let denom = want.abs().max(1e-12);
            assert!(((tape.val(d) - want) / denom).abs() < 1e-10);
        }
    }

    #[test]
    fn sampson_through_pose_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = Intrinsics::new(110.0, 105.0, 48.0, 36.0, 96, 72).unwrap();
        for _ in 0..10 {
            let pa = random_pose(&mut rng);
            let pb = random_pose(&mut rng);
            if se3::fundamental_matrix(&pa, &pb, &k, &k).is_err() {
                continue;
            }
            let corr: Vec<([f64; 2], [f64; 2])> = (0..8)
                .map(|_| {
                    (
                        [rng.random_range(0.0..96.0), rng.random_range(0.0..72.0)],
                        [rng.random_range(0.0..96.0), rng.random_range(0.0..72.0)],
                    )
                })
                .collect();
            // Pack both poses into a 12-vector for the FD oracle.
            let mut x0 = Vec::new();
            x0.extend_from_slice(&pa.r);
            x0.extend_from_slice(&pa.t);
            x0.extend_from_slice(&pb.r);
            x0.extend_from_slice(&pb.t);
            let eval = |v: &[f64]| {
                let pi = Pose6 {
                    r: [v[0], v[1], v[2]],
                    t: [v[3], v[4], v[5]],
                };
                let pj = Pose6 {
                    r: [v[6], v[7], v[8]],
                    t: [v[9], v[10], v[11]],
                };
                let f = se3::fundamental_matrix(&pi, &pj, &k, &k).unwrap();
                corr.iter()
                    .map(|(x, xp)| se3::sampson_distance(x, xp, &f).unwrap())
                    .sum::<f64>()
            };
            let fd = finite_diff_gradient(eval, &x0, 1e-6);

            let mut tape = Tape::new();
            let ta = TrackedPose::from_leaves(&mut tape, &pa);
            let tb = TrackedPose::from_leaves(&mut tape, &pb);
            let f = fundamental_tracked(&mut tape, &ta, &tb, &k, &k).unwrap();
            let mut total: Option<Var> = None;
            for (x, xp) in &corr {
                let d = sampson_tracked(&mut tape, x, xp, &f);
                total = Some(match total {
                    None => d,
                    Some(prev) => tape.add(prev, d),
                });
            }
            tape.backward(total.unwrap(), &[], &mut []).unwrap();
            let leaves = [
                ta.r[0], ta.r[1], ta.r[2], ta.t[0], ta.t[1], ta.t[2], tb.r[0], tb.r[1], tb.r[2],
                tb.t[0], tb.t[1], tb.t[2],
            ];
            for (i, leaf) in leaves.iter().enumerate() {
                let g = tape.adjoint(*leaf);
                let denom = g.abs().max(fd[i].abs()).max(1e-4);
                assert!(
                    ((g - fd[i]) / denom).abs() < 1e-4,
                    "component {i}: {g} vs {}",
                    fd[i]
                );
            }
        }
    }

    #[test]
    fn canonicalize_tracked_wraps_when_needed() {
        let axis = se3::normalize3(&[0.2, 0.5, -0.8]);
        let long = se3::scale3(&axis, 1.4 * PI);
        let mut tape = Tape::new();
        let r = [tape.leaf(long[0]), tape.leaf(long[1]), tape.leaf(long[2])];
        let wrapped = canonicalize_tracked(&mut tape, r);
        let vals = [
            tape.val(wrapped[0]),
            tape.val(wrapped[1]),
            tape.val(wrapped[2]),
        ];
        let want = se3::canonicalize_axis_angle(&long);
        for k in 0..3 {
            assert_abs_diff_eq!(vals[k], want[k], epsilon = 1e-12);
        }
        // Canonical input comes back as the very same nodes.
        let mut tape = Tape::new();
        let r = [tape.leaf(0.1), tape.leaf(0.0), tape.leaf(0.0)];
        let same = canonicalize_tracked(&mut tape, r);
        assert_eq!(same[0], r[0]);
    }

    #[test]
    fn ray_direction_stays_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = Intrinsics::new(110.0, 105.0, 48.0, 36.0, 96, 72).unwrap();
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let mut tape = Tape::new();
            let tp = TrackedPose::from_leaves(&mut tape, &pose);
            let rot = rodrigues_tracked(&mut tape, &tp.r);
            let dir_cam = k.pixel_ray(rng.random_range(0.0..96.0), rng.random_range(0.0..72.0));
            let (_, dir) = ray_through_pixel(&mut tape, &rot, &tp.t, &dir_cam);
            let n = (tape.val(dir[0]).powi(2) + tape.val(dir[1]).powi(2)
                + tape.val(dir[2]).powi(2))
            .sqrt();
            assert_abs_diff_eq!(n, 1.0, epsilon = 1e-9);
        }
    }
}
