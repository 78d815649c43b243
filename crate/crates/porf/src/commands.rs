//! Command implementations behind the CLI: benchmark synthesis, pose
//! refinement, trajectory evaluation, the four-mode ablation, and rendering
//! with trained fields. Every command validates its configuration fully
//! before touching the filesystem.

use crate::autodiff::ParamVector;
use crate::config::RunConfig;
use crate::epipolar::{read_matches, write_matches};
use crate::error::{Error, Result};
use crate::harness::{
    ate, evaluate, perturb_poses, read_poses, render_gt_image, synth_correspondences,
    umeyama_align, write_poses, EvalReport, Trajectory,
};
use crate::image::{read_image, write_image, ImageF64};
use crate::renderer::{render_learned_image, RenderContext};
use crate::se3::Intrinsics;
use crate::trainer::{ablate, train, AblationReport, Dataset};
use rayon::prelude::*;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub mode: Option<String>,
    pub iterations: Option<u64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(mode) = &self.mode {
            cfg.train.mode = crate::trainer::Mode::parse(mode)?;
        }
        if let Some(iters) = self.iterations {
            cfg.train.iterations = iters;
        }
        if let Some(seed) = self.seed {
            cfg.override_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(())
    }
}

fn frame_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join(format!("frame_{frame:03}.ppm"))
}

/// Generate the benchmark dataset: ground-truth poses and images, noisy
/// initial poses, correspondences, and a manifest of the resolved config.
pub fn cmd_synth(config_path: &Path, overrides: &Overrides) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    overrides.apply(&mut cfg)?;
    let scene = cfg
        .scene
        .clone()
        .ok_or_else(|| Error::Config("missing [scene] section".to_string()))?;
    let tcfg = cfg
        .trajectory
        .clone()
        .ok_or_else(|| Error::Config("missing [trajectory] section".to_string()))?;
    let k = tcfg.intrinsics()?;
    let gt = crate::harness::orbit_trajectory(tcfg.frames, tcfg.radius, tcfg.elevation_deg, k)?;
    let initial = perturb_poses(&gt, &cfg.noise)?;
    let corr = &cfg.correspondences;
    let matches = synth_correspondences(
        &scene,
        &gt,
        corr.per_pair,
        corr.noise_px,
        corr.outlier_rate,
        corr.max_angle_deg,
        corr.seed,
    )?;
    log::info!(
        "synthesized {} frames, {} covisible pairs",
        gt.len(),
        matches.len()
    );
    let images: Vec<ImageF64> = gt
        .poses
        .par_iter()
        .map(|pose| render_gt_image(&scene, pose, &k))
        .collect();

    // All computation done; only now touch the filesystem.
    let out = &cfg.out_dir;
    let frames_dir = out.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    write_poses(&out.join("gt_poses.txt"), &gt.poses)?;
    write_poses(&out.join("init_poses.txt"), &initial.poses)?;
    write_matches(&out.join("matches.txt"), &matches)?;
    for (i, img) in images.iter().enumerate() {
        write_image(&frame_path(&frames_dir, i), img)?;
    }
    std::fs::File::create(out.join("manifest.txt"))?.write_all(cfg.manifest().as_bytes())?;
    Ok(())
}

/// Load a synthesized dataset directory for refinement.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let tcfg = cfg
        .trajectory
        .as_ref()
        .ok_or_else(|| Error::Config("missing [trajectory] section".to_string()))?;
    let k = tcfg.intrinsics()?;
    let dir = &cfg.data_dir;
    let init_path = dir.join("init_poses.txt");
    if !init_path.exists() {
        return Err(Error::Config(format!(
            "dataset is missing {}",
            init_path.display()
        )));
    }
    let initial = Trajectory {
        poses: read_poses(&init_path)?,
        intrinsics: k,
    };
    let gt_path = dir.join("gt_poses.txt");
    let gt = if gt_path.exists() {
        Some(Trajectory {
            poses: read_poses(&gt_path)?,
            intrinsics: k,
        })
    } else {
        None
    };
    let matches_path = dir.join("matches.txt");
    let matches = if matches_path.exists() {
        read_matches(&matches_path)?
    } else if cfg.train.mode.uses_eg() {
        return Err(Error::Config(format!(
            "mode '{}' needs correspondences but {} is missing",
            cfg.train.mode.name(),
            matches_path.display()
        )));
    } else {
        Vec::new()
    };
    let frames_dir = dir.join("frames");
    let images: Result<Vec<ImageF64>> = (0..initial.len())
        .map(|i| read_image(&frame_path(&frames_dir, i)))
        .collect();
    Ok(Dataset {
        images: images?,
        initial,
        matches,
        gt,
    })
}

/// Refine poses with the configured mode; writes refined poses, the run
/// log, and a parameter checkpoint.
pub fn cmd_refine(config_path: &Path, overrides: &Overrides) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    overrides.apply(&mut cfg)?;
    let dataset = load_dataset(&cfg)?;
    let out = train(&cfg.train, &dataset)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_poses(&cfg.out_dir.join("refined_poses.txt"), &out.refined.poses)?;
    out.log.write_csv(&cfg.out_dir.join("runlog.csv"))?;
    out.params.save(&cfg.out_dir.join("checkpoint.bin"))?;
    if out.diagnostics.nonfinite_grads > 0 {
        log::warn!(
            "{} non-finite gradient entries were zeroed",
            out.diagnostics.nonfinite_grads
        );
    }
    if let Some(iter) = out.diverged_at {
        return Err(Error::Divergence { iteration: iter });
    }
    if let Some(row) = out.log.rows.last() {
        log::info!(
            "final losses: colour {:.5} reg {:.5} eg {:.5}",
            row.l_colour,
            row.l_reg,
            row.l_eg
        );
    }
    Ok(())
}

/// 7-DoF alignment + ATE between two pose files; prints means and writes a
/// per-frame CSV.
pub fn cmd_eval(est_path: &Path, gt_path: &Path, out_dir: Option<&Path>) -> Result<EvalReport> {
    let est_poses = read_poses(est_path)?;
    let gt_poses = read_poses(gt_path)?;
    if est_poses.len() != gt_poses.len() {
        return Err(Error::InvalidArgument(format!(
            "{} has {} frames, {} has {}",
            est_path.display(),
            est_poses.len(),
            gt_path.display(),
            gt_poses.len()
        )));
    }
    // ATE never reads intrinsics; a unit placeholder keeps the types whole.
    let k = Intrinsics::new(1.0, 1.0, 0.5, 0.5, 1, 1)?;
    let est = Trajectory {
        poses: est_poses,
        intrinsics: k,
    };
    let gt = Trajectory {
        poses: gt_poses,
        intrinsics: k,
    };
    let (sim, aligned) = umeyama_align(&est, &gt)?;
    let mut report = ate(&aligned, &gt)?;
    report.sim3 = sim;

    println!(
        "mean rotation error: {:.6} deg\nmean translation error: {:.6} (scene units x1000)",
        report.mean_rot_deg, report.mean_trans
    );
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| est_path.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&dir)?;
    let mut csv = String::from("frame,rot_err_deg,trans_err\n");
    for (i, (r, t)) in report
        .per_frame_rot_deg
        .iter()
        .zip(&report.per_frame_trans)
        .enumerate()
    {
        csv.push_str(&format!("{i},{r},{t}\n"));
    }
    std::fs::File::create(dir.join("eval.csv"))?.write_all(csv.as_bytes())?;
    Ok(report)
}

/// Run the four ablation modes with one seed/budget; prints the table and
/// writes `ablation.csv` plus per-mode run logs.
pub fn cmd_ablate(config_path: &Path, overrides: &Overrides) -> Result<AblationReport> {
    let mut cfg = RunConfig::load(config_path)?;
    overrides.apply(&mut cfg)?;
    let dataset = load_dataset(&cfg)?;
    if dataset.gt.is_none() {
        return Err(Error::Config(
            "ablation needs gt_poses.txt in the dataset directory".to_string(),
        ));
    }
    let report = ablate(&cfg.train, &dataset)?;
    print!("{}", report.table_text());
    std::fs::create_dir_all(&cfg.out_dir)?;
    report.write_csv(&cfg.out_dir.join("ablation.csv"))?;
    for run in &report.runs {
        run.log
            .write_csv(&cfg.out_dir.join(format!("runlog_{}.csv", run.mode.name())))?;
    }
    Ok(report)
}

/// Render every frame of a pose file with a trained checkpoint and report
/// PSNR against the dataset's reference images.
pub fn cmd_render(
    config_path: &Path,
    poses_path: &Path,
    checkpoint_path: &Path,
    overrides: &Overrides,
) -> Result<f64> {
    let mut cfg = RunConfig::load(config_path)?;
    overrides.apply(&mut cfg)?;
    if !checkpoint_path.exists() {
        return Err(Error::Config(format!(
            "checkpoint {} does not exist",
            checkpoint_path.display()
        )));
    }
    let params = ParamVector::load(checkpoint_path)?;
    let (sdf, colour) = cfg.train.networks();
    let need = |name: &str| -> Result<usize> {
        params
            .segment(name)
            .map(|s| s.offset)
            .ok_or_else(|| Error::Config(format!("checkpoint has no '{name}' segment")))
    };
    let ctx = RenderContext {
        sdf: &sdf,
        colour: &colour,
        sdf_off: need("sdf")?,
        sharp_off: need("sdf_sharpness")?,
        colour_off: need("colour")?,
    };
    let tcfg = cfg
        .trajectory
        .as_ref()
        .ok_or_else(|| Error::Config("missing [trajectory] section".to_string()))?;
    let k = tcfg.intrinsics()?;
    let poses = read_poses(poses_path)?;

    let renders_dir = cfg.out_dir.join("renders");
    std::fs::create_dir_all(&renders_dir)?;
    let frames_dir = cfg.data_dir.join("frames");
    let mut csv = String::from("frame,psnr_db\n");
    let mut mean = 0.0;
    let mut count = 0usize;
    for (i, pose) in poses.iter().enumerate() {
        let img = render_learned_image(
            params.data(),
            &ctx,
            pose,
            &k,
            cfg.train.points_per_ray,
            cfg.train.near,
            cfg.train.far,
        )?;
        write_image(&frame_path(&renders_dir, i), &img)?;
        let gt_path = frame_path(&frames_dir, i);
        if gt_path.exists() {
            let gt = read_image(&gt_path)?;
            let db = crate::harness::psnr(&img, &gt)?;
            csv.push_str(&format!("{i},{db}\n"));
            mean += db;
            count += 1;
        }
    }
    if count > 0 {
        mean /= count as f64;
        csv.push_str(&format!("mean,{mean}\n"));
        println!("mean PSNR: {mean:.3} dB over {count} frames");
    }
    std::fs::File::create(cfg.out_dir.join("psnr.csv"))?.write_all(csv.as_bytes())?;
    Ok(mean)
}

/// Convenience wrapper used by tests: full evaluation of two in-memory
/// trajectories.
pub fn evaluate_trajectories(est: &Trajectory, gt: &Trajectory) -> Result<EvalReport> {
    evaluate(est, gt)
}
