//! Correspondence-driven pose supervision: pair sampling, inlier/outlier
//! splitting against a pixel threshold, and the inlier-rate-weighted
//! epipolar loss computed differentiably through the refined poses.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::se3::{sampson_distance, Intrinsics, Mat3};
use crate::textio::{fmt_f64, parse_f64};
use crate::tracked::{fundamental_tracked, mat3_values, sampson_tracked, TrackedPose};
use rand::Rng;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// A pixel-coordinate match between two frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub u1: f64,
    pub v1: f64,
    pub u2: f64,
    pub v2: f64,
}

impl Correspondence {
    pub fn first(&self) -> [f64; 2] {
        [self.u1, self.v1]
    }

    pub fn second(&self) -> [f64; 2] {
        [self.u2, self.v2]
    }
}

/// All matches between one ordered frame pair (i < j).
#[derive(Debug, Clone, PartialEq)]
pub struct PairMatches {
    pub frame_i: usize,
    pub frame_j: usize,
    pub correspondences: Vec<Correspondence>,
}

impl PairMatches {
    pub fn new(frame_i: usize, frame_j: usize, correspondences: Vec<Correspondence>) -> Result<Self> {
        if frame_i >= frame_j {
            return Err(Error::InvalidArgument(format!(
                "pair frames must satisfy i < j, got ({frame_i}, {frame_j})"
            )));
        }
        Ok(PairMatches {
            frame_i,
            frame_j,
            correspondences,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.correspondences.is_empty()
    }
}

/// Per-pair record of one epipolar loss evaluation.
#[derive(Debug, Clone)]
pub struct PairTerm {
    pub db_index: usize,
    pub inliers: usize,
    pub total: usize,
    pub rate: f64,
    pub weight: f64,
    pub mean_error: f64,
    pub skipped_degenerate: bool,
}

/// Diagnostics for one sampled batch.
#[derive(Debug, Clone)]
pub struct EpipolarBatch {
    pub terms: Vec<PairTerm>,
    pub delta: f64,
    pub degenerate_skips: usize,
}

/// Draw `n_pairs` database indices uniformly with replacement from the
/// non-empty pairs.
pub fn sample_pairs(db: &[PairMatches], n_pairs: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let candidates: Vec<usize> = db
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.is_empty())
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(
            "no non-empty correspondence pairs to sample".to_string(),
        ));
    }
    Ok((0..n_pairs)
        .map(|_| candidates[rng.random_range(0..candidates.len())])
        .collect())
}

/// Hard inlier split: correspondence k is an inlier iff
/// `sqrt(sampson(x_k, x'_k, F)) <= delta` pixels. Returns the indices and
/// the inlier rate (0 for an empty pair).
pub fn split_inliers(pair: &PairMatches, f: &Mat3, delta: f64) -> Result<(Vec<usize>, f64)> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be positive, got {delta}"
        )));
    }
    if pair.is_empty() {
        return Ok((Vec::new(), 0.0));
    }
    let mut inliers = Vec::new();
    for (k, c) in pair.correspondences.iter().enumerate() {
        let d = sampson_distance(&c.first(), &c.second(), f)?;
        if d.sqrt() <= delta {
            inliers.push(k);
        }
    }
    let rate = inliers.len() as f64 / pair.correspondences.len() as f64;
    Ok((inliers, rate))
}

/// Weighted epipolar loss over a sampled batch:
/// `(1/n) sum_i p_i^2 * mean_k sampson(inlier k)`, with the fundamental
/// matrix rebuilt from the tracked refined poses and the inlier split
/// recomputed (untracked) from their current values. Degenerate-baseline
/// pairs are skipped and counted.
pub fn epipolar_loss(
    tape: &mut Tape,
    db: &[PairMatches],
    sampled: &[usize],
    mut pose_provider: impl FnMut(&mut Tape, usize) -> Result<TrackedPose>,
    intrinsics: &Intrinsics,
    delta: f64,
) -> Result<(Var, EpipolarBatch)> {
    if sampled.is_empty() {
        return Err(Error::InvalidArgument("empty pair sample".to_string()));
    }
    let n = sampled.len() as f64;
    let mut acc: Option<Var> = None;
    let mut terms = Vec::with_capacity(sampled.len());
    let mut degenerate_skips = 0usize;
    for &idx in sampled {
        let pair = &db[idx];
        let pose_i = pose_provider(tape, pair.frame_i)?;
        let pose_j = pose_provider(tape, pair.frame_j)?;
        let Some(f_tracked) = fundamental_tracked(tape, &pose_i, &pose_j, intrinsics, intrinsics)
        else {
            degenerate_skips += 1;
            terms.push(PairTerm {
                db_index: idx,
                inliers: 0,
                total: pair.correspondences.len(),
                rate: 0.0,
                weight: 0.0,
                mean_error: 0.0,
                skipped_degenerate: true,
            });
            continue;
        };
        let f_vals = mat3_values(tape, &f_tracked);
        let (inliers, rate) = split_inliers(pair, &f_vals, delta)?;
        if inliers.is_empty() {
            terms.push(PairTerm {
                db_index: idx,
                inliers: 0,
                total: pair.correspondences.len(),
                rate,
                weight: rate * rate,
                mean_error: 0.0,
                skipped_degenerate: false,
            });
            continue;
        }
        let mut pair_sum: Option<Var> = None;
        for &k in &inliers {
            let c = &pair.correspondences[k];
            let e = sampson_tracked(tape, &c.first(), &c.second(), &f_tracked);
            pair_sum = Some(match pair_sum {
                None => e,
                Some(prev) => tape.add(prev, e),
            });
        }
        let mean = tape.mul_c(pair_sum.unwrap(), 1.0 / inliers.len() as f64);
        // The weight is the squared inlier rate, held constant (no gradient
        // through the discrete split).
        let weight = rate * rate;
        let term = tape.mul_c(mean, weight);
        terms.push(PairTerm {
            db_index: idx,
            inliers: inliers.len(),
            total: pair.correspondences.len(),
            rate,
            weight,
            mean_error: tape.val(mean),
            skipped_degenerate: false,
        });
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term),
        });
    }
    let loss = match acc {
        Some(sum) => tape.mul_c(sum, 1.0 / n),
        None => tape.constant(0.0),
    };
    Ok((
        loss,
        EpipolarBatch {
            terms,
            delta,
            degenerate_skips,
        },
    ))
}

/// Total training objective `L_NSR + beta * L_EG`.
pub fn total_loss(tape: &mut Tape, l_nsr: Var, l_eg: Option<Var>, beta: f64) -> Result<Var> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "beta must be non-negative, got {beta}"
        )));
    }
    match l_eg {
        None => Ok(l_nsr),
        Some(eg) => {
            let scaled = tape.mul_c(eg, beta);
            Ok(tape.add(l_nsr, scaled))
        }
    }
}

/// Write the correspondence database as text: `PAIR <i> <j> <count>`
/// headers followed by `<u1> <v1> <u2> <v2>` lines.
pub fn write_matches(path: &Path, db: &[PairMatches]) -> Result<()> {
    let mut out = String::new();
    out.push_str("# correspondence pairs: PAIR <i> <j> <count>, then <u1> <v1> <u2> <v2> lines\n");
    for pair in db {
        out.push_str(&format!(
            "PAIR {} {} {}\n",
            pair.frame_i,
            pair.frame_j,
            pair.correspondences.len()
        ));
        for c in &pair.correspondences {
            out.push_str(&format!(
                "{} {} {} {}\n",
                fmt_f64(c.u1),
                fmt_f64(c.v1),
                fmt_f64(c.u2),
                fmt_f64(c.v2)
            ));
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Parse a correspondence database written by [`write_matches`] (or an
/// external exporter following the same format). `#` starts a comment.
pub fn read_matches(path: &Path) -> Result<Vec<PairMatches>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut db: Vec<PairMatches> = Vec::new();
    let mut pending: Option<(usize, usize, usize, Vec<Correspondence>)> = None;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        if let Some(rest) = text.strip_prefix("PAIR ") {
            if let Some((i, j, count, corr)) = pending.take() {
                if corr.len() != count {
                    return Err(perr(
                        lineno,
                        format!("pair ({i}, {j}) declared {count} matches, found {}", corr.len()),
                    ));
                }
                db.push(PairMatches::new(i, j, corr).map_err(|e| perr(lineno, e.to_string()))?);
            }
            let fields: Vec<&str> = rest.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(perr(lineno, "PAIR header needs <i> <j> <count>".to_string()));
            }
            let i: usize = fields[0]
                .parse()
                .map_err(|_| perr(lineno, format!("bad frame index {}", fields[0])))?;
            let j: usize = fields[1]
                .parse()
                .map_err(|_| perr(lineno, format!("bad frame index {}", fields[1])))?;
            let count: usize = fields[2]
                .parse()
                .map_err(|_| perr(lineno, format!("bad count {}", fields[2])))?;
            pending = Some((i, j, count, Vec::with_capacity(count)));
            continue;
        }
        let Some((_, _, _, corr)) = pending.as_mut() else {
            return Err(perr(lineno, "correspondence line before any PAIR header".to_string()));
        };
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(perr(lineno, "expected <u1> <v1> <u2> <v2>".to_string()));
        }
        corr.push(Correspondence {
            u1: parse_f64(fields[0], path, lineno)?,
            v1: parse_f64(fields[1], path, lineno)?,
            u2: parse_f64(fields[2], path, lineno)?,
            v2: parse_f64(fields[3], path, lineno)?,
        });
    }
    if let Some((i, j, count, corr)) = pending.take() {
        if corr.len() != count {
            return Err(perr(
                0,
                format!("pair ({i}, {j}) declared {count} matches, found {}", corr.len()),
            ));
        }
        db.push(PairMatches::new(i, j, corr).map_err(|e| perr(0, e.to_string()))?);
    }
    Ok(db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_gradient;
    use crate::se3::{self, Pose6};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn unit_k() -> Intrinsics {
        // Identity-like intrinsics for hand-computable fundamental matrices.
        Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 100,
            height: 100,
        }
    }

    fn bench_k() -> Intrinsics {
        Intrinsics::new(110.0, 105.0, 48.0, 36.0, 96, 72).unwrap()
    }

    /// Camera at `centre` with its optical axis through the origin.
    fn look_at_origin(centre: [f64; 3]) -> Pose6 {
        let forward = se3::normalize3(&se3::scale3(&centre, -1.0));
        let up = [0.0, 1.0, 0.0];
        let right = se3::normalize3(&se3::cross3(&up, &forward));
        let down = se3::cross3(&forward, &right);
        let rm = crate::se3::Mat3::from_rows(
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        );
        Pose6::new(se3::rotation_log(&rm).unwrap(), centre).unwrap()
    }

    #[test]
    fn sampling_single_pair_repeats_it() {
        let db = vec![PairMatches::new(
            0,
            1,
            vec![Correspondence {
                u1: 0.0,
                v1: 0.0,
                u2: 1.0,
                v2: 1.0,
            }],
        )
        .unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sample = sample_pairs(&db, 20, &mut rng).unwrap();
        assert_eq!(sample, vec![0; 20]);
    }

    #[test]
    fn sampling_is_seed_deterministic_and_skips_empty() {
        let mk = |i, j, n| {
            PairMatches::new(
                i,
                j,
                (0..n)
                    .map(|k| Correspondence {
                        u1: k as f64,
                        v1: 0.0,
                        u2: 0.0,
                        v2: k as f64,
                    })
                    .collect(),
            )
            .unwrap()
        };
        let db = vec![mk(0, 1, 3), mk(1, 2, 0), mk(2, 3, 5)];
        let a = sample_pairs(&db, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_pairs(&db, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&i| i != 1), "empty pair was sampled");
        assert!(sample_pairs(&[], 5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn sampling_is_uniform_over_candidates() {
        let mk = |i, j| {
            PairMatches::new(
                i,
                j,
                vec![Correspondence {
                    u1: 0.0,
                    v1: 0.0,
                    u2: 0.0,
                    v2: 0.0,
                }],
            )
            .unwrap()
        };
        let db = vec![mk(0, 1), mk(0, 2), mk(1, 2), mk(1, 3)];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sample = sample_pairs(&db, 100_000, &mut rng).unwrap();
        let mut counts = [0usize; 4];
        for &s in &sample {
            counts[s] += 1;
        }
        for c in counts {
            let freq = c as f64 / 100_000.0;
            assert!((freq - 0.25).abs() < 0.01, "frequency {freq}");
        }
    }

    #[test]
    fn split_inliers_basics() {
        // Pure-translation F: sampson = (v2 - v1)^2 / 2 under unit K.
        let a = Pose6::identity();
        let b = Pose6::new([0.0; 3], [1.0, 0.0, 0.0]).unwrap();
        let k = unit_k();
        let f = se3::fundamental_matrix(&a, &b, &k, &k).unwrap();
        let on_line = |u: f64, v: f64| Correspondence {
            u1: u,
            v1: v,
            u2: u + 5.0,
            v2: v,
        };
        let pair = PairMatches::new(
            0,
            1,
            vec![on_line(0.0, 0.0), on_line(3.0, 7.0), on_line(-2.0, 1.0)],
        )
        .unwrap();
        let (inliers, rate) = split_inliers(&pair, &f, 20.0).unwrap();
        assert_eq!(inliers, vec![0, 1, 2]);
        assert_eq!(rate, 1.0);

        // A correspondence at sampson 625 px^2 (25 px) is an outlier at 20 px.
        let off = Correspondence {
            u1: 0.0,
            v1: 0.0,
            u2: 0.0,
            v2: 25.0 * std::f64::consts::SQRT_2,
        };
        let d = se3::sampson_distance(&off.first(), &off.second(), &f).unwrap();
        assert_abs_diff_eq!(d, 625.0, epsilon = 1e-9);
        let pair = PairMatches::new(0, 1, vec![off]).unwrap();
        let (inliers, rate) = split_inliers(&pair, &f, 20.0).unwrap();
        assert!(inliers.is_empty());
        assert_eq!(rate, 0.0);

        let empty = PairMatches::new(0, 1, vec![]).unwrap();
        let (inliers, rate) = split_inliers(&empty, &f, 20.0).unwrap();
        assert!(inliers.is_empty());
        assert_eq!(rate, 0.0);
        assert!(split_inliers(&empty, &f, 0.0).is_err());
    }

    #[test]
    fn split_recovers_injected_outlier_fraction() {
        // 10% outliers at >= 50 px sampson-root residual against the true F.
        let k = bench_k();
        let a = look_at_origin([2.0, 0.0, 0.0]);
        let b = look_at_origin([1.8, 0.2, 0.8]);
        let f = se3::fundamental_matrix(&a, &b, &k, &k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut correspondences = Vec::new();
        let mut made_outliers = 0usize;
        for n in 0..500 {
            // Project a random world point into both frames for a perfect
            // match, then corrupt 10%.
            let mut x = None;
            for _ in 0..100 {
                let cand = [
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ];
                if let (Some(pa), Some(pb)) =
                    (se3::project(&a, &k, &cand), se3::project(&b, &k, &cand))
                {
                    x = Some((pa, pb));
                    break;
                }
            }
            let (pa, pb) = x.expect("found a covisible point");
            if n % 10 == 0 {
                // Push the second endpoint far off the epipolar line.
                let mut c = Correspondence {
                    u1: pa[0],
                    v1: pa[1],
                    u2: pb[0],
                    v2: pb[1] + 400.0,
                };
                // Ensure the construction really is > 50 px.
                let mut d = se3::sampson_distance(&c.first(), &c.second(), &f).unwrap();
                while d.sqrt() < 50.0 {
                    c.v2 += 400.0;
                    d = se3::sampson_distance(&c.first(), &c.second(), &f).unwrap();
                }
                made_outliers += 1;
                correspondences.push(c);
            } else {
                correspondences.push(Correspondence {
                    u1: pa[0],
                    v1: pa[1],
                    u2: pb[0],
                    v2: pb[1],
                });
            }
        }
        assert_eq!(made_outliers, 50);
        let pair = PairMatches::new(0, 1, correspondences).unwrap();
        let (inliers, rate) = split_inliers(&pair, &f, 20.0).unwrap();
        assert!(
            (inliers.len() as i64 - 450).abs() <= 1,
            "inliers {}",
            inliers.len()
        );
        assert!((rate - 0.9).abs() <= 1.0 / 500.0 + 1e-12);
    }

    fn leaf_provider(
        poses: Vec<Pose6>,
    ) -> impl FnMut(&mut Tape, usize) -> crate::error::Result<TrackedPose> {
        let mut cache: HashMap<usize, TrackedPose> = HashMap::new();
        move |tape, frame| {
            if let Some(p) = cache.get(&frame) {
                return Ok(*p);
            }
            let tp = TrackedPose::from_leaves(tape, &poses[frame]);
            cache.insert(frame, tp);
            Ok(tp)
        }
    }

    #[test]
    fn loss_zero_for_perfect_geometry() {
        let k = bench_k();
        let a = look_at_origin([2.0, 0.0, 0.0]);
        let b = look_at_origin([1.8, 0.2, 0.8]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut correspondences = Vec::new();
        while correspondences.len() < 50 {
            let cand = [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ];
            if let (Some(pa), Some(pb)) = (se3::project(&a, &k, &cand), se3::project(&b, &k, &cand))
            {
                correspondences.push(Correspondence {
                    u1: pa[0],
                    v1: pa[1],
                    u2: pb[0],
                    v2: pb[1],
                });
            }
        }
        let db = vec![PairMatches::new(0, 1, correspondences).unwrap()];
        let mut tape = Tape::new();
        let (loss, batch) = epipolar_loss(
            &mut tape,
            &db,
            &[0, 0, 0],
            leaf_provider(vec![a, b]),
            &k,
            20.0,
        )
        .unwrap();
        assert!(tape.val(loss) < 1e-15, "loss {}", tape.val(loss));
        assert_eq!(batch.terms.len(), 3);
        assert_eq!(batch.terms[0].rate, 1.0);
    }

    #[test]
    fn loss_matches_hand_computed_weighting() {
        // Pure-translation pair under unit K: sampson = (v2 - v1)^2 / 2.
        // Half the matches sit at error 2.0 (inliers at delta = 1.5), half
        // far outside; expected loss = p^2 * mean = 0.25 * 2.0 = 0.5.
        let a = Pose6::identity();
        let b = Pose6::new([0.0; 3], [1.0, 0.0, 0.0]).unwrap();
        let k = unit_k();
        let mut correspondences = Vec::new();
        for i in 0..10 {
            let v_shift = if i % 2 == 0 { 2.0 } else { 10.0 };
            correspondences.push(Correspondence {
                u1: i as f64,
                v1: 0.0,
                u2: i as f64 + 1.0,
                v2: v_shift,
            });
        }
        let db = vec![PairMatches::new(0, 1, correspondences).unwrap()];
        let mut tape = Tape::new();
        let (loss, batch) = epipolar_loss(
            &mut tape,
            &db,
            &[0],
            leaf_provider(vec![a, b]),
            &k,
            1.5,
        )
        .unwrap();
        assert_eq!(batch.terms[0].inliers, 5);
        assert_abs_diff_eq!(batch.terms[0].rate, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(batch.terms[0].weight, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(batch.terms[0].mean_error, 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(tape.val(loss), 0.5, epsilon = 1e-9);
    }

    #[test]
    fn weight_law_zero_vs_half_outliers() {
        // 0% outliers -> w = 1; 50% outliers -> w = 0.25, exactly.
        let a = Pose6::identity();
        let b = Pose6::new([0.0; 3], [1.0, 0.0, 0.0]).unwrap();
        let k = unit_k();
        let f = se3::fundamental_matrix(&a, &b, &k, &k).unwrap();
        let clean: Vec<Correspondence> = (0..8)
            .map(|i| Correspondence {
                u1: i as f64,
                v1: 1.0,
                u2: i as f64 * 2.0,
                v2: 1.0,
            })
            .collect();
        let pair = PairMatches::new(0, 1, clean.clone()).unwrap();
        let (_, rate) = split_inliers(&pair, &f, 5.0).unwrap();
        assert_eq!(rate * rate, 1.0);
        let mut half = clean;
        for c in half.iter_mut().take(4) {
            c.v2 += 1000.0;
        }
        let pair = PairMatches::new(0, 1, half).unwrap();
        let (_, rate) = split_inliers(&pair, &f, 5.0).unwrap();
        assert_eq!(rate, 0.5);
        assert_eq!(rate * rate, 0.25);
    }

    #[test]
    fn loss_gradient_through_poses_matches_fd() {
        let k = bench_k();
        let a = look_at_origin([2.0, 0.0, 0.0]);
        let b = look_at_origin([1.8, 0.2, 0.8]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut correspondences = Vec::new();
        while correspondences.len() < 30 {
            let cand = [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ];
            if let (Some(pa), Some(pb)) = (se3::project(&a, &k, &cand), se3::project(&b, &k, &cand))
            {
                // Mild pixel noise keeps the loss away from zero.
                correspondences.push(Correspondence {
                    u1: pa[0] + rng.random_range(-1.0..1.0),
                    v1: pa[1] + rng.random_range(-1.0..1.0),
                    u2: pb[0] + rng.random_range(-1.0..1.0),
                    v2: pb[1] + rng.random_range(-1.0..1.0),
                });
            }
        }
        let db = vec![PairMatches::new(0, 1, correspondences).unwrap()];

        let eval = |v: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let pa = Pose6 {
                r: [v[0], v[1], v[2]],
                t: [v[3], v[4], v[5]],
            };
            let pb = Pose6 {
                r: [v[6], v[7], v[8]],
                t: [v[9], v[10], v[11]],
            };
            let mut tape = Tape::new();
            let mut leaves = Vec::new();
            let mut provider = |tape: &mut Tape, frame: usize| {
                let p = if frame == 0 { &pa } else { &pb };
                let tp = TrackedPose::from_leaves(tape, p);
                leaves.push(tp);
                Ok(tp)
            };
            let (loss, _) = epipolar_loss(&mut tape, &db, &[0], &mut provider, &k, 20.0).unwrap();
            let mut grad = Vec::new();
            if want_grad {
                tape.backward(loss, &[], &mut []).unwrap();
                for tp in &leaves {
                    for c in 0..3 {
                        grad.push(tape.adjoint(tp.r[c]));
                    }
                    for c in 0..3 {
                        grad.push(tape.adjoint(tp.t[c]));
                    }
                }
            }
            (tape.val(loss), grad)
        };
        let mut x0 = Vec::new();
        x0.extend_from_slice(&a.r);
        x0.extend_from_slice(&a.t);
        x0.extend_from_slice(&b.r);
        x0.extend_from_slice(&b.t);
        let (_, analytic) = eval(&x0, true);
        let fd = finite_diff_gradient(|v| eval(v, false).0, &x0, 1e-6);
        for i in 0..12 {
            let denom = analytic[i].abs().max(fd[i].abs()).max(1e-6);
            assert!(
                ((analytic[i] - fd[i]) / denom).abs() < 1e-4,
                "component {i}: {} vs {}",
                analytic[i],
                fd[i]
            );
        }
    }

    #[test]
    fn loss_minimized_at_true_pose() {
        // Noiseless pair; sweep a 1-parameter rotation of camera b and check
        // the loss minimum sits within 0.05 degrees of the truth.
        let k = bench_k();
        let a = look_at_origin([2.0, 0.0, 0.0]);
        let b = look_at_origin([1.7, 0.1, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut correspondences = Vec::new();
        while correspondences.len() < 100 {
            let cand = [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ];
            if let (Some(pa), Some(pb)) = (se3::project(&a, &k, &cand), se3::project(&b, &k, &cand))
            {
                correspondences.push(Correspondence {
                    u1: pa[0],
                    v1: pa[1],
                    u2: pb[0],
                    v2: pb[1],
                });
            }
        }
        let db = vec![PairMatches::new(0, 1, correspondences).unwrap()];
        let mut best = (f64::INFINITY, f64::NAN);
        let step_deg = 0.01;
        let mut phi_deg: f64 = -2.0;
        while phi_deg <= 2.0 {
            let phi = phi_deg.to_radians();
            let perturbed = Pose6::new([b.r[0], b.r[1], b.r[2] + phi], b.t).unwrap();
            let mut tape = Tape::new();
            let (loss, _) = epipolar_loss(
                &mut tape,
                &db,
                &[0],
                leaf_provider(vec![a, perturbed]),
                &k,
                20.0,
            )
            .unwrap();
            let v = tape.val(loss);
            if v < best.0 {
                best = (v, phi_deg);
            }
            phi_deg += step_deg;
        }
        assert!(
            best.1.abs() <= 0.05,
            "loss minimized at {} degrees",
            best.1
        );
    }

    #[test]
    fn total_loss_combination() {
        let mut tape = Tape::new();
        let nsr = tape.leaf(0.3);
        let eg = tape.leaf(0.5);
        let l = total_loss(&mut tape, nsr, Some(eg), 1.0).unwrap();
        assert_abs_diff_eq!(tape.val(l), 0.8, epsilon = 1e-15);
        let l0 = total_loss(&mut tape, nsr, Some(eg), 0.0).unwrap();
        assert_abs_diff_eq!(tape.val(l0), 0.3, epsilon = 1e-15);
        let ln = total_loss(&mut tape, nsr, None, 1.0).unwrap();
        assert_eq!(ln, nsr);
        assert!(total_loss(&mut tape, nsr, Some(eg), -0.5).is_err());
    }

    #[test]
    fn matches_roundtrip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut db = Vec::new();
        for p in 0..5 {
            let corr: Vec<Correspondence> = (0..rng.random_range(0..40))
                .map(|_| Correspondence {
                    u1: rng.random_range(-100.0..100.0),
                    v1: rng.random_range(-100.0..100.0) * 1e-7,
                    u2: rng.random_range(-1e6..1e6),
                    v2: if rng.random_bool(0.1) { 0.0 } else { rng.random() },
                })
                .collect();
            db.push(PairMatches::new(p, p + 1 + rng.random_range(0..3), corr).unwrap());
        }
        let dir = std::env::temp_dir().join("porf_matches_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("matches.txt");
        write_matches(&path, &db).unwrap();
        let back = read_matches(&path).unwrap();
        assert_eq!(back.len(), db.len());
        for (a, b) in back.iter().zip(&db) {
            assert_eq!(a.frame_i, b.frame_i);
            assert_eq!(a.frame_j, b.frame_j);
            assert_eq!(a.correspondences.len(), b.correspondences.len());
            for (ca, cb) in a.correspondences.iter().zip(&b.correspondences) {
                assert_eq!(ca.u1.to_bits(), cb.u1.to_bits());
                assert_eq!(ca.v1.to_bits(), cb.v1.to_bits());
                assert_eq!(ca.u2.to_bits(), cb.u2.to_bits());
                assert_eq!(ca.v2.to_bits(), cb.v2.to_bits());
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn matches_parse_errors_carry_line_numbers() {
        let dir = std::env::temp_dir().join("porf_matches_bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.txt");
        std::fs::write(&path, "PAIR 0 1 2\n1 2 3 4\n").unwrap();
        // Declared 2 matches, provided 1.
        assert!(read_matches(&path).is_err());
        std::fs::write(&path, "1 2 3 4\n").unwrap();
        match read_matches(&path) {
            Err(crate::error::Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
