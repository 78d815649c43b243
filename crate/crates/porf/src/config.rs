//! Run configuration: sectioned `key = value` text files covering the
//! scene, trajectory, noise, correspondence synthesis, training, and
//! output paths. Unknown sections or keys are rejected by name.

use crate::error::{Error, Result};
use crate::harness::{NoiseSpec, Primitive, SyntheticScene};
use crate::se3::Intrinsics;
use crate::trainer::{Mode, Preset, TrainConfig};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default)]
struct RawConfig {
    /// section -> key -> (value, line)
    sections: BTreeMap<String, BTreeMap<String, (String, usize)>>,
}

fn parse_raw(path: &Path) -> Result<RawConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut raw = RawConfig::default();
    let mut current: Option<String> = None;
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim().to_string();
            raw.sections.entry(name.clone()).or_default();
            current = Some(name);
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected `key = value`, got {trimmed:?}"),
            });
        };
        let Some(section) = current.clone() else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: "key before any [section] header".to_string(),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        let entries = raw.sections.get_mut(&section).unwrap();
        if entries.contains_key(&key) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("duplicate key {key:?} in [{section}]"),
            });
        }
        entries.insert(key, (value, lineno));
    }
    Ok(raw)
}

/// A `[section]` view with typed getters and leftover-key detection.
struct Section<'a> {
    name: &'a str,
    entries: BTreeMap<String, (String, usize)>,
}

impl<'a> Section<'a> {
    fn get(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                Error::Config(format!("key '{key}' in [{}] is not a number: {v:?}", self.name))
            }),
        }
    }

    fn u64(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                Error::Config(format!("key '{key}' in [{}] is not an integer: {v:?}", self.name))
            }),
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        Ok(self.u64(key, default as u64)? as usize)
    }

    fn floats(&self, name: &str, value: &str, count: usize) -> Result<Vec<f64>> {
        let vals: Vec<f64> = value
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| {
                Error::Config(format!("key '{name}' in [{}] needs {count} numbers", self.name))
            })?;
        if vals.len() != count {
            return Err(Error::Config(format!(
                "key '{name}' in [{}] needs {count} numbers, got {}",
                self.name,
                vals.len()
            )));
        }
        Ok(vals)
    }

    fn reject_leftovers(&self) -> Result<()> {
        if let Some(key) = self.entries.keys().next() {
            return Err(Error::Config(format!(
                "unknown key '{key}' in [{}]",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryConfig {
    pub frames: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    pub width: u32,
    pub height: u32,
    pub fov_deg: f64,
}

impl TrajectoryConfig {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        if !(10.0..=120.0).contains(&self.fov_deg) {
            return Err(Error::Config(format!(
                "fov_deg {} outside the supported 10..120 range",
                self.fov_deg
            )));
        }
        let f = 0.5 * self.width as f64 / (0.5 * self.fov_deg.to_radians()).tan();
        Intrinsics::new(
            f,
            f,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
        .map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct CorrConfig {
    pub per_pair: usize,
    pub noise_px: f64,
    pub outlier_rate: f64,
    pub max_angle_deg: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scene: Option<SyntheticScene>,
    pub trajectory: Option<TrajectoryConfig>,
    pub noise: NoiseSpec,
    pub correspondences: CorrConfig,
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut raw = parse_raw(path)?;
        let known = [
            "scene",
            "trajectory",
            "noise",
            "correspondences",
            "train",
            "paths",
        ];
        for section in raw.sections.keys() {
            if !known.contains(&section.as_str()) {
                return Err(Error::Config(format!("unknown section [{section}]")));
            }
        }
        let mut take = |name: &str| -> Option<Section> {
            raw.sections.remove(name).map(|entries| Section { name: "", entries }).map(
                |mut s| {
                    s.name = Box::leak(name.to_string().into_boxed_str());
                    s
                },
            )
        };

        let scene = match take("scene") {
            None => None,
            Some(mut s) => {
                let blend = s.f64("blend", 0.05)?;
                let mut primitives = Vec::new();
                let keys: Vec<String> = s.entries.keys().cloned().collect();
                for key in keys {
                    if key.starts_with("sphere") && key[6..].chars().all(|c| c.is_ascii_digit()) {
                        let (value, _) = s.entries.remove(&key).unwrap();
                        let v = s.floats(&key, &value, 4)?;
                        if !(v[3] > 0.0) {
                            return Err(Error::Config(format!(
                                "key '{key}' in [scene]: radius must be positive"
                            )));
                        }
                        primitives.push(Primitive::Sphere {
                            centre: [v[0], v[1], v[2]],
                            radius: v[3],
                        });
                    } else if key.starts_with("box") && key[3..].chars().all(|c| c.is_ascii_digit())
                    {
                        let (value, _) = s.entries.remove(&key).unwrap();
                        let v = s.floats(&key, &value, 6)?;
                        if !(v[3] > 0.0 && v[4] > 0.0 && v[5] > 0.0) {
                            return Err(Error::Config(format!(
                                "key '{key}' in [scene]: half extents must be positive"
                            )));
                        }
                        primitives.push(Primitive::Cuboid {
                            centre: [v[0], v[1], v[2]],
                            half_extents: [v[3], v[4], v[5]],
                        });
                    }
                }
                s.reject_leftovers()?;
                Some(SyntheticScene::new(primitives, blend).map_err(|e| Error::Config(e.to_string()))?)
            }
        };

        let trajectory = match take("trajectory") {
            None => None,
            Some(mut s) => {
                let t = TrajectoryConfig {
                    frames: s.usize("frames", 24)?,
                    radius: s.f64("radius", 2.0)?,
                    elevation_deg: s.f64("elevation_deg", 12.0)?,
                    width: s.u64("width", 96)? as u32,
                    height: s.u64("height", 96)? as u32,
                    fov_deg: s.f64("fov_deg", 50.0)?,
                };
                s.reject_leftovers()?;
                t.intrinsics()?; // validate eagerly
                Some(t)
            }
        };

        let mut train = TrainConfig::desk();
        if let Some(mut s) = take("train") {
            if let Some(p) = s.get("preset") {
                let preset = Preset::parse(&p)?;
                train = match preset {
                    Preset::Desk => TrainConfig::desk(),
                    Preset::Paper => TrainConfig::paper(),
                };
            }
            if let Some(m) = s.get("mode") {
                train.mode = Mode::parse(&m)?;
            }
            train.iterations = s.u64("iterations", train.iterations)?;
            train.rays_per_iter = s.usize("rays_per_iter", train.rays_per_iter)?;
            train.points_per_ray = s.usize("points_per_ray", train.points_per_ray)?;
            train.pairs_per_iter = s.usize("pairs_per_iter", train.pairs_per_iter)?;
            train.threshold_px = s.f64("threshold_px", train.threshold_px)?;
            train.lambda = s.f64("lambda", train.lambda)?;
            train.beta = s.f64("beta", train.beta)?;
            train.alpha = s.f64("alpha", train.alpha)?;
            train.lr_render = s.f64("lr_render", train.lr_render)?;
            train.lr_pose = s.f64("lr_pose", train.lr_pose)?;
            train.near = s.f64("near", train.near)?;
            train.far = s.f64("far", train.far)?;
            train.seed = s.u64("seed", train.seed)?;
            train.log_every = s.u64("log_every", train.log_every)?;
            s.reject_leftovers()?;
        }
        train.validate()?;

        let noise = match take("noise") {
            None => NoiseSpec::new(0.0, 0.0, derive_seed(train.seed, 1))
                .map_err(|e| Error::Config(e.to_string()))?,
            Some(mut s) => {
                let spec = NoiseSpec::new(
                    s.f64("sigma_rot_deg", 0.0)?,
                    s.f64("sigma_trans_frac", 0.0)?,
                    s.u64("seed", derive_seed(train.seed, 1))?,
                )
                .map_err(|e| Error::Config(e.to_string()))?;
                s.reject_leftovers()?;
                spec
            }
        };

        let correspondences = match take("correspondences") {
            None => CorrConfig {
                per_pair: 500,
                noise_px: 1.0,
                outlier_rate: 0.1,
                max_angle_deg: 45.0,
                seed: derive_seed(train.seed, 2),
            },
            Some(mut s) => {
                let c = CorrConfig {
                    per_pair: s.usize("per_pair", 500)?,
                    noise_px: s.f64("noise_px", 1.0)?,
                    outlier_rate: s.f64("outlier_rate", 0.1)?,
                    max_angle_deg: s.f64("max_angle_deg", 45.0)?,
                    seed: s.u64("seed", derive_seed(train.seed, 2))?,
                };
                s.reject_leftovers()?;
                if !(0.0..1.0).contains(&c.outlier_rate) {
                    return Err(Error::Config(format!(
                        "key 'outlier_rate' in [correspondences] must be in [0, 1), got {}",
                        c.outlier_rate
                    )));
                }
                if c.per_pair == 0 {
                    return Err(Error::Config(
                        "key 'per_pair' in [correspondences] must be at least 1".to_string(),
                    ));
                }
                c
            }
        };

        let (data_dir, out_dir) = match take("paths") {
            None => (PathBuf::from("out"), PathBuf::from("out")),
            Some(mut s) => {
                let out = s.get("out").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"));
                let data = s.get("data").map(PathBuf::from).unwrap_or_else(|| out.clone());
                s.reject_leftovers()?;
                (data, out)
            }
        };

        Ok(RunConfig {
            scene,
            trajectory,
            noise,
            correspondences,
            train,
            data_dir,
            out_dir,
        })
    }

    /// Override the master seed: training seed plus the derived noise and
    /// correspondence streams (explicit per-section seeds notwithstanding).
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.noise.seed = derive_seed(seed, 1);
        self.correspondences.seed = derive_seed(seed, 2);
    }

    /// The fully resolved configuration as config-file text.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        if let Some(scene) = &self.scene {
            out.push_str("[scene]\n");
            out.push_str(&format!("blend = {}\n", scene.blend));
            let mut sphere = 0;
            let mut cuboid = 0;
            for p in &scene.primitives {
                match p {
                    Primitive::Sphere { centre, radius } => {
                        sphere += 1;
                        out.push_str(&format!(
                            "sphere{sphere} = {} {} {} {}\n",
                            centre[0], centre[1], centre[2], radius
                        ));
                    }
                    Primitive::Cuboid {
                        centre,
                        half_extents,
                    } => {
                        cuboid += 1;
                        out.push_str(&format!(
                            "box{cuboid} = {} {} {} {} {} {}\n",
                            centre[0],
                            centre[1],
                            centre[2],
                            half_extents[0],
                            half_extents[1],
                            half_extents[2]
                        ));
                    }
                }
            }
            out.push('\n');
        }
        if let Some(t) = &self.trajectory {
            out.push_str(&format!(
                "[trajectory]\nframes = {}\nradius = {}\nelevation_deg = {}\nwidth = {}\nheight = {}\nfov_deg = {}\n\n",
                t.frames, t.radius, t.elevation_deg, t.width, t.height, t.fov_deg
            ));
        }
        out.push_str(&format!(
            "[noise]\nsigma_rot_deg = {}\nsigma_trans_frac = {}\nseed = {}\n\n",
            self.noise.sigma_rot_deg, self.noise.sigma_trans_frac, self.noise.seed
        ));
        let c = &self.correspondences;
        out.push_str(&format!(
            "[correspondences]\nper_pair = {}\nnoise_px = {}\noutlier_rate = {}\nmax_angle_deg = {}\nseed = {}\n\n",
            c.per_pair, c.noise_px, c.outlier_rate, c.max_angle_deg, c.seed
        ));
        let t = &self.train;
        out.push_str(&format!(
            "[train]\niterations = {}\nmode = {}\npreset = {}\nrays_per_iter = {}\npoints_per_ray = {}\npairs_per_iter = {}\nthreshold_px = {}\nlambda = {}\nbeta = {}\nalpha = {}\nlr_render = {}\nlr_pose = {}\nnear = {}\nfar = {}\nseed = {}\nlog_every = {}\n\n",
            t.iterations,
            t.mode.name(),
            t.preset.name(),
            t.rays_per_iter,
            t.points_per_ray,
            t.pairs_per_iter,
            t.threshold_px,
            t.lambda,
            t.beta,
            t.alpha,
            t.lr_render,
            t.lr_pose,
            t.near,
            t.far,
            t.seed,
            t.log_every
        ));
        out.push_str(&format!(
            "[paths]\ndata = {}\nout = {}\n",
            self.data_dir.display(),
            self.out_dir.display()
        ));
        out
    }
}

fn derive_seed(master: u64, stream: u64) -> u64 {
    master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_cfg(content: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("porf_cfg_{}", rand::random::<u64>()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(&path, content).unwrap();
        path
    }

    #[test]
    fn full_config_parses() {
        let path = write_cfg(
            "# benchmark\n[scene]\nblend = 0.05\nsphere1 = 0.3 0.1 0.0 0.4\nsphere2 = -0.3 -0.1 0.0 0.35\n\n\
             [trajectory]\nframes = 24\nradius = 2.0\nelevation_deg = 12\nwidth = 96\nheight = 96\nfov_deg = 50\n\n\
             [noise]\nsigma_rot_deg = 0.5\nsigma_trans_frac = 0.01\n\n\
             [correspondences]\nper_pair = 500\nnoise_px = 1.0\noutlier_rate = 0.1\n\n\
             [train]\niterations = 5000\nmode = full\nseed = 3\n\n\
             [paths]\nout = bench\n",
        );
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.scene.as_ref().unwrap().primitives.len(), 2);
        assert_eq!(cfg.trajectory.as_ref().unwrap().frames, 24);
        assert_eq!(cfg.train.iterations, 5000);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.train.rays_per_iter, 512);
        assert_eq!(cfg.noise.sigma_rot_deg, 0.5);
        assert_eq!(cfg.out_dir, PathBuf::from("bench"));
        assert_eq!(cfg.data_dir, PathBuf::from("bench"));
        std::fs::remove_dir_all(path.parent().unwrap()).ok();
    }

    #[test]
    fn unknown_keys_are_named() {
        let path = write_cfg("[train]\nbogus_key = 7\n");
        match RunConfig::load(&path) {
            Err(Error::Config(msg)) => assert!(msg.contains("bogus_key"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        std::fs::remove_dir_all(path.parent().unwrap()).ok();
    }

    #[test]
    fn unknown_sections_are_rejected() {
        let path = write_cfg("[mystery]\nx = 1\n");
        match RunConfig::load(&path) {
            Err(Error::Config(msg)) => assert!(msg.contains("mystery"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        std::fs::remove_dir_all(path.parent().unwrap()).ok();
    }

    #[test]
    fn malformed_lines_carry_line_numbers() {
        let path = write_cfg("[train]\niterations 100\n");
        match RunConfig::load(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::remove_dir_all(path.parent().unwrap()).ok();
    }

    #[test]
    fn seed_override_rederives_streams() {
        let path = write_cfg("[train]\nseed = 1\n");
        let mut cfg = RunConfig::load(&path).unwrap();
        let noise_before = cfg.noise.seed;
        cfg.override_seed(99);
        assert_eq!(cfg.train.seed, 99);
        assert_ne!(cfg.noise.seed, noise_before);
        std::fs::remove_dir_all(path.parent().unwrap()).ok();
    }

    #[test]
    fn manifest_roundtrips_through_parser() {
        let path = write_cfg(
            "[scene]\nsphere1 = 0.3 0.1 0.0 0.4\n\n[trajectory]\nframes = 8\n\n[train]\nseed = 5\n",
        );
        let cfg = RunConfig::load(&path).unwrap();
        let manifest = cfg.manifest();
        let path2 = write_cfg(&manifest);
        let cfg2 = RunConfig::load(&path2).unwrap();
        assert_eq!(cfg2.manifest(), manifest);
        std::fs::remove_dir_all(path.parent().unwrap()).ok();
        std::fs::remove_dir_all(path2.parent().unwrap()).ok();
    }

    #[test]
    fn preset_switch_changes_defaults() {
        let path = write_cfg("[train]\npreset = paper\n");
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.train.iterations, 50_000);
        assert_eq!(cfg.train.points_per_ray, 128);
        std::fs::remove_dir_all(path.parent().unwrap()).ok();
    }
}
